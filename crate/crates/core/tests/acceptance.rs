//! Acceptance suite on the synth-v1 benchmark. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::Request;
use chair_core::autodiff::Tape;
use chair_core::cli::classification_accuracy;
use chair_core::data::{classification_split, generate, retrieval_split, Dataset, Protocol, SynthConfig};
use chair_core::intervention::{intervene_explicit, intervention_values};
use chair_core::model::{AnyModel, ChairModel, Checkpoint, CheckpointMeta, Dims, ModelKind, Network};
use chair_core::retrieval::{evaluate_retrieval, intervention_grid, recall_accuracy_at_k, recall_at_k, top_k, EncodedSplit, Gallery, QueryResult};
use chair_core::service::{self, RetrieveResponse, SessionState};
use chair_core::training::{chair_batch_loss, train_baseline, train_chair, ChairRun, Mode, TrainConfig};
use chair_core::util::sha256_file;
use http_body_util::BodyExt;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tower::ServiceExt;

const SEEDS: [u64; 3] = [1, 2, 3];
const FRACTIONS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------- oracles

fn unit(v: &[f64]) -> Vec<f64> {
    let mut s = 0.0;
    for x in v {
        s += x * x;
    }
    let n = s.sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn random_row(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-2i32..=2) as f64).collect();
        if v.iter().any(|&x| x != 0.0) {
            return v;
        }
    }
}

fn top_k_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x70);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=50);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| random_row(&mut rng, d)).collect();
        let q = random_row(&mut rng, d);
        let k = rng.random_range(1..=60);
        let exclude = rng.random_bool(0.5).then(|| rng.random_range(0..n));
        let g = Gallery::from_embeddings((0..n as u64).collect(), (0..n).collect(), rows.clone(), 0.0).unwrap();
        let got = top_k(&g, &q, k, exclude.map(|e| e as u64)).unwrap();

        let qn = unit(&q);
        let mut all: Vec<(usize, f64)> = (0..n).filter(|&i| Some(i) != exclude).map(|i| (i, 1.0 - dot(&qn, &unit(&rows[i])))).collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        let same = got.indices == all.iter().map(|x| x.0).collect::<Vec<_>>()
            && got.distances == all.iter().map(|x| x.1).collect::<Vec<_>>()
            && got.truncated == (all.len() < k);
        mismatches += !same as usize;
    }
    let t = start.elapsed();
    outcome(mismatches == 0 && t < Duration::from_secs(10), format!("{mismatches} mismatches / 1000, {:.2}s (< 10s)", t.as_secs_f64()))
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x71);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=30);
        let k = rng.random_range(1..=10);
        let classes = rng.random_range(1..=6);
        let labels: Vec<Vec<usize>> = (0..n).map(|_| (0..k).map(|_| rng.random_range(0..classes)).collect()).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let res: Vec<QueryResult> = labels
            .iter()
            .map(|l| QueryResult { query_id: None, ids: vec![0; k], indices: vec![0; k], distances: vec![0.0; k], labels: l.clone(), truncated: false })
            .collect();
        let (mut any, mut hits) = (0usize, 0usize);
        for q in 0..n {
            let h = labels[q].iter().filter(|&&l| l == truth[q]).count();
            hits += h;
            any += (h > 0) as usize;
        }
        let ok = recall_at_k(&res, &truth).unwrap() == any as f64 / n as f64
            && recall_accuracy_at_k(&res, &truth).unwrap() == hits as f64 / (n * k) as f64;
        mismatches += !ok as usize;
    }
    let t = start.elapsed();
    outcome(mismatches == 0 && t < Duration::from_secs(5), format!("{mismatches} mismatches / 1000, {:.2}s (< 5s)", t.as_secs_f64()))
}

// Independent scalar loss: mean BCE-with-logits over all concept entries plus
// mean softmax cross-entropy, from the untaped forward pass.
fn reference_loss(model: &ChairModel, data: &Dataset, idx: &[usize]) -> f64 {
    let (mut bce, mut ce) = (0.0, 0.0);
    let mut count = 0;
    for &i in idx {
        let e = &data.examples[i];
        let f = model.forward(&e.x).unwrap();
        for (l, &t) in f.concepts.logits.iter().zip(&e.c) {
            bce += l.max(0.0) - l * t as f64 + (-l.abs()).exp().ln_1p();
            count += 1;
        }
        let m = f.class_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + f.class_logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        ce += lse - f.class_logits[e.y];
    }
    bce / count as f64 + ce / idx.len() as f64
}

fn gradient_suite(ds: &Dataset) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x72);
    let dims = Dims { input_dim: ds.input_dim(), hidden: 64, embed_dim: 32, num_concepts: ds.num_concepts(), num_classes: ds.num_classes() };
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut model = ChairModel::new(dims, &mut rng);
        let idx = sample(&mut rng, ds.len(), 4).into_vec();

        let mut tape = Tape::new();
        let (loss, bound) = chair_batch_loss(&model, &mut tape, ds, &idx).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for b in &bound {
            for v in [b.w, b.b] {
                analytic.extend_from_slice(grads.get(v).unwrap());
            }
        }

        let mut numeric = Vec::with_capacity(analytic.len());
        let n_layers = model.layers_mut().len();
        for li in 0..n_layers {
            for part in 0..2 {
                let len = {
                    let mut layers = model.layers_mut();
                    let l = &mut layers[li].1;
                    if part == 0 { l.weight.len() } else { l.bias.len() }
                };
                for j in 0..len {
                    let nudge = |m: &mut ChairModel, delta: f64| {
                        let mut layers = m.layers_mut();
                        let l = &mut layers[li].1;
                        let t = if part == 0 { &mut l.weight } else { &mut l.bias };
                        t.data_mut()[j] += delta;
                    };
                    let orig = {
                        let mut layers = model.layers_mut();
                        let l = &mut layers[li].1;
                        (if part == 0 { &l.weight } else { &l.bias }).data()[j]
                    };
                    nudge(&mut model, eps);
                    let up = reference_loss(&model, ds, &idx);
                    nudge(&mut model, -2.0 * eps);
                    let down = reference_loss(&model, ds, &idx);
                    {
                        let mut layers = model.layers_mut();
                        let l = &mut layers[li].1;
                        (if part == 0 { &mut l.weight } else { &mut l.bias }).data_mut()[j] = orig;
                    }
                    numeric.push((up - down) / (2.0 * eps));
                }
            }
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let tape_loss = tape.value(loss).data()[0];
        let loss_gap = (tape_loss - reference_loss(&model, ds, &idx)).abs();
        worst = worst.max(diff / norm).max(loss_gap);
    }
    let t = start.elapsed();
    outcome(worst < 1e-4 && t < Duration::from_secs(30), format!("max relative error {worst:.2e} (< 1e-4), {:.1}s (< 30s)", t.as_secs_f64()))
}

// ------------------------------------------------------------- benchmark

struct SeedRuns {
    full: ChairRun,
    stage1: ChairRun,
}

struct Bench {
    ds: Dataset,
    eval: Dataset,
    runs: HashMap<(Mode, u64), SeedRuns>,
    default_mode_seconds: f64,
}

fn mode_cfg(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig { mode, seed, ..Default::default() }
}

fn bench() -> Bench {
    let ds = generate(&SynthConfig::default()).unwrap();
    let split = retrieval_split(&ds).unwrap();
    let mut runs = HashMap::new();
    let mut default_mode_seconds = 0.0;
    let default_mode = TrainConfig::default().mode;
    for mode in [Mode::Joint, Mode::Sequential] {
        for seed in SEEDS {
            let start = Instant::now();
            let full = train_chair(&split.train, None, &mode_cfg(mode, seed), true).unwrap();
            if mode == default_mode {
                default_mode_seconds += start.elapsed().as_secs_f64();
            }
            let stage1 = train_chair(&split.train, None, &mode_cfg(mode, seed), false).unwrap();
            runs.insert((mode, seed), SeedRuns { full, stage1 });
        }
    }
    Bench { ds, eval: split.eval, runs, default_mode_seconds }
}

fn recall10(run: &ChairRun, eval: &Dataset, p: f64, seed: u64) -> f64 {
    let m = AnyModel::Chair(run.model.clone());
    let enc = EncodedSplit::new(&m, eval).unwrap();
    evaluate_retrieval(&m, &enc, Some(&run.values), p, p, seed, &[10]).unwrap()[0].recall
}

fn monotonicity(b: &Bench) -> (Outcome, Vec<f64>) {
    let start = Instant::now();
    let mode = TrainConfig::default().mode;
    let curve: Vec<f64> = FRACTIONS
        .iter()
        .map(|&p| mean(&SEEDS.map(|s| recall10(&b.runs[&(mode, s)].full, &b.eval, p, s))))
        .collect();
    let secs = b.default_mode_seconds + start.elapsed().as_secs_f64();
    let worst_drop = curve.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
    let ok = worst_drop <= 0.02 && secs < 600.0;
    (outcome(ok, format!("mean Recall@10 over fractions [{}], largest drop {:+.4} (<= 0.02), {secs:.1}s (< 600s)", fmt(&curve), worst_drop)), curve)
}

fn full_intervention(curve: &[f64]) -> Outcome {
    let r = curve[curve.len() - 1];
    outcome(r >= 0.95, format!("Recall@10 at fraction 1.0 = {r:.4} (>= 0.95)"))
}

fn stage2_benefit(b: &Bench) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for mode in [Mode::Joint, Mode::Sequential] {
        let gains: Vec<f64> = SEEDS
            .iter()
            .map(|&s| {
                let r = &b.runs[&(mode, s)];
                recall10(&r.full, &b.eval, 0.5, s) - recall10(&r.stage1, &b.eval, 0.5, s)
            })
            .collect();
        let g = mean(&gains);
        ok &= g >= 0.02;
        parts.push(format!("{mode} {:+.2} pts", 100.0 * g));
    }
    outcome(ok, format!("Recall@10 gain at fraction 0.5 over stage-1-only: {} (>= +2 pts each)", parts.join(", ")))
}

fn baseline_ordering(b: &Bench) -> Outcome {
    let split = retrieval_split(&b.ds).unwrap();
    let mode = TrainConfig::default().mode;
    let (mut chair, mut standard, mut extend) = (Vec::new(), Vec::new(), Vec::new());
    let r1 = |m: &AnyModel, values| {
        let enc = EncodedSplit::new(m, &b.eval).unwrap();
        evaluate_retrieval(m, &enc, values, 0.0, 0.0, 1, &[1]).unwrap()[0].recall
    };
    for s in SEEDS {
        let run = &b.runs[&(mode, s)].full;
        chair.push(r1(&AnyModel::Chair(run.model.clone()), Some(&run.values)));
        let cfg = mode_cfg(mode, s);
        standard.push(r1(&train_baseline(ModelKind::Standard, &split.train, None, &cfg).unwrap().0, None));
        extend.push(r1(&train_baseline(ModelKind::CbmExtend, &split.train, None, &cfg).unwrap().0, None));
    }
    let (c, st, ex) = (mean(&chair), mean(&standard), mean(&extend));
    let ok = c >= st && st >= ex && c - ex >= 0.05;
    outcome(ok, format!("Recall@1 chair {c:.4} >= standard {st:.4} >= cbm-extend {ex:.4}, gap {:+.2} pts (>= 5)", 100.0 * (c - ex)))
}

fn classification_parity(b: &Bench) -> Outcome {
    let split = classification_split(&b.ds, 1).unwrap();
    let mut parts = Vec::new();
    let mut ok = true;
    for mode in [Mode::Joint, Mode::Sequential] {
        let (mut chair, mut cbm) = (Vec::new(), Vec::new());
        for s in SEEDS {
            let cfg = mode_cfg(mode, s);
            let meta = CheckpointMeta { protocol: Protocol::Classification { seed: 1 }, mode: Some(mode), stages: vec![1, 2], seed: s };
            let run = train_chair(&split.train, Some(&split.val), &cfg, true).unwrap();
            let ck = Checkpoint { model: AnyModel::Chair(run.model), meta: meta.clone(), intervention_values: Some(run.values) };
            chair.push(classification_accuracy(&ck, &split.test, 1.0, s).unwrap());
            let (model, _) = train_baseline(ModelKind::Cbm, &split.train, Some(&split.val), &cfg).unwrap();
            let values = intervention_values(&model, &split.train, cfg.percentile_basis).unwrap();
            let ck = Checkpoint { model, meta, intervention_values: Some(values) };
            cbm.push(classification_accuracy(&ck, &split.test, 1.0, s).unwrap());
        }
        let (c, v) = (mean(&chair), mean(&cbm));
        ok &= c >= v - 0.01;
        parts.push(format!("{mode} chair {c:.4} vs cbm {v:.4}"));
    }
    outcome(ok, format!("accuracy under full intervention: {} (chair >= cbm - 1 pt)", parts.join(", ")))
}

fn heatmap(b: &Bench) -> Outcome {
    let mode = TrainConfig::default().mode;
    let mut gains = vec![0.0; FRACTIONS.len()];
    for s in SEEDS {
        let run = &b.runs[&(mode, s)].full;
        let m = AnyModel::Chair(run.model.clone());
        let enc = EncodedSplit::new(&m, &b.eval).unwrap();
        let g = intervention_grid(&m, &enc, Some(&run.values), &FRACTIONS, &[0.0, 1.0], 10, &[s]).unwrap();
        for (r, row) in g.mean.iter().enumerate() {
            gains[r] += (row[1] - row[0]) / SEEDS.len() as f64;
        }
    }
    let ok = gains.iter().all(|&g| g >= 0.01);
    let shown: Vec<String> = FRACTIONS.iter().zip(&gains).map(|(f, g)| format!("{f}:{:+.2}", 100.0 * g)).collect();
    outcome(ok, format!("RecallAccuracy@10 gain from query fraction 0 to 1 per gallery row [{}] pts (>= +1 each)", shown.join(" ")))
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_chair")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn determinism() -> Outcome {
    let dir = tempfile::TempDir::new().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let mut hashes = Vec::new();
    for tag in ["a", "b"] {
        let (data, ck, eval, grid) = (p(&format!("{tag}.jsonl")), p(&format!("{tag}.ck")), p(&format!("{tag}.eval.csv")), p(&format!("{tag}.grid.csv")));
        run_cli(&["synth", "--out", &data]);
        run_cli(&["train", "--data", &data, "--seed", "1", "--out", &ck]);
        run_cli(&["eval", "--checkpoint", &ck, "--data", &data, "--fraction", "0,0.5,1", "--seed", "1,2,3", "--out", &eval]);
        run_cli(&["grid", "--checkpoint", &ck, "--data", &data, "--out", &grid]);
        hashes.push([&ck, &eval, &grid].map(|f| sha256_file(Path::new(f)).unwrap()));
    }
    let same = hashes[0] == hashes[1];
    outcome(same, format!("checkpoint {}…, eval {}…, grid {}… identical across reruns: {same}", &hashes[0][0][..12], &hashes[0][1][..12], &hashes[0][2][..12]))
}

fn service_consistency(b: &Bench) -> Outcome {
    let run = &b.runs[&(TrainConfig::default().mode, 1)].full;
    let ck = Checkpoint {
        model: AnyModel::Chair(run.model.clone()),
        meta: CheckpointMeta { protocol: Protocol::Retrieval, mode: Some(TrainConfig::default().mode), stages: vec![1, 2], seed: 1 },
        intervention_values: Some(run.values.clone()),
    };
    let hash = ck.hash();
    let state = Arc::new(SessionState::new(ck, hash, &b.ds, 0.0, 1).unwrap());
    let rt = tokio::runtime::Runtime::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x73);
    let k_concepts = b.ds.num_concepts();
    let mut mismatches = 0;
    for i in sample(&mut rng, b.eval.len(), 20) {
        let e = &b.eval.examples[i];
        let count = rng.random_range(0..=k_concepts);
        let forced: BTreeMap<usize, bool> = sample(&mut rng, k_concepts, count)
            .into_iter()
            .map(|c| (c, rng.random_bool(0.5)))
            .collect();
        let body = json!({
            "query_id": e.id,
            "interventions": forced.iter().map(|(c, &v)| (c.to_string(), v as u8)).collect::<BTreeMap<_, _>>(),
            "k": 10,
        });
        let resp: RetrieveResponse = rt.block_on(async {
            let req = Request::post("/retrieve").header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
            let resp = service::router(state.clone()).oneshot(req).await.unwrap();
            serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap()
        });

        let base = state.model.base(&e.x).unwrap();
        let c_hat = intervene_explicit(&base.concepts.as_ref().unwrap().activations, &forced, &run.values).unwrap();
        let q = state.model.embedding(&base, Some(&c_hat)).unwrap();
        let want = top_k(&state.gallery, &q, 10, Some(e.id)).unwrap();
        let same = resp.results.iter().map(|r| r.id).eq(want.ids.iter().copied())
            && resp.results.iter().map(|r| r.distance.to_bits()).eq(want.distances.iter().map(|d| d.to_bits()));
        mismatches += !same as usize;
    }
    outcome(mismatches == 0, format!("{mismatches} ranking mismatches / 20 items"))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("top_k oracle", top_k_oracle());
    report("metric oracles", metric_oracles());
    let ds = generate(&SynthConfig::default()).unwrap();
    report("gradient suite", gradient_suite(&ds));
    let b = bench();
    let (mono, curve) = monotonicity(&b);
    report("intervention monotonicity", mono);
    report("full-intervention retrieval", full_intervention(&curve));
    report("stage-2 benefit", stage2_benefit(&b));
    report("baseline ordering", baseline_ordering(&b));
    report("classification parity", classification_parity(&b));
    report("heatmap trend", heatmap(&b));
    report("determinism", determinism());
    report("service/cli consistency", service_consistency(&b));

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
