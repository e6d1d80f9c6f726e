//! Acceptance suite: one PASS/FAIL line per criterion, run sequentially so
//! the timing bounds are measured without contention.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use osd_core::analysis::{
    expected_length, flops_ratio, monte_carlo_expected_length, reproduce_reference_table, total_update_flops,
    total_update_flops_unsimplified, FlopsInputs,
};
use osd_core::distill::{offline_distill, DistanceMeasure, DistillConfig, OptimizerState};
use osd_core::engine::{warmup, ClusterRouter, EngineConfig, OnlineEngine, ServeLog};
use osd_core::model::{
    softmax_with_temperature, CategoricalDistribution, NeuralDraftModel, TokenId, Vocabulary,
};
use osd_core::report::{rolling_alpha, rolling_alpha_where, token_stats};
use osd_core::specdecode::{exact_output_marginal, SpeculationConfig};
use osd_core::workload::{
    build_grammar, build_target, gen_cluster_trace, gen_mix_trace, gen_prompts, gen_shift_trace, GrammarSpec,
    ShiftSchedule, TraceRecord,
};
use osd_core::SeededRng;

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

/// Mean of the first and last quarter of a series.
fn quarters(v: &[f64]) -> (f64, f64) {
    let q = v.len() / 4;
    (mean(&v[..q]), mean(&v[v.len() - q..]))
}

fn speculation() -> SpeculationConfig {
    SpeculationConfig { k: 5, max_total_len: 128, serve_tau: 1.0 }
}

fn engine_cfg(seed: u64) -> EngineConfig {
    EngineConfig { update_interval: 8, speculation: speculation(), seed, ..Default::default() }
}

fn relabeled_specs(count: u32, seed: u64, vocab: u32, support: u32) -> Vec<GrammarSpec> {
    (0..count)
        .map(|i| {
            let mut s = GrammarSpec::new(format!("c{i}"), seed, vocab).with_support(i * support, support);
            s.eos_rate = 0.02;
            s
        })
        .collect()
}

fn random_dist(n: usize, rng: &mut SeededRng) -> CategoricalDistribution {
    let mut w: Vec<f64> = (0..n).map(|_| if rng.uniform() < 0.3 { 0.0 } else { rng.uniform() }).collect();
    if w.iter().all(|x| *x == 0.0) {
        w[rng.range_inclusive(0, n - 1)] = 1.0;
    }
    CategoricalDistribution::from_weights(w).unwrap()
}

/// A context-dependent random conditional: the row for a context is a pure
/// function of `(seed, context)`.
fn random_conditional(seed: u64, n: usize) -> impl Fn(&[TokenId]) -> CategoricalDistribution {
    move |ctx: &[TokenId]| {
        let key = ctx.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, t| (h ^ t.0 as u64).wrapping_mul(0x100_0000_01b3));
        random_dist(n, &mut SeededRng::with_stream(seed, key))
    }
}

fn exactness() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = SeededRng::new(1);
    for pair in 0..100u64 {
        let n = rng.range_inclusive(2, 8);
        let p = random_conditional(2 * pair, n);
        let q = random_conditional(2 * pair + 1, n);
        let ctx = [TokenId(rng.range_inclusive(0, n - 1) as u32)];
        for k in [1, 2] {
            let m = exact_output_marginal(&q, &p, &ctx, k).unwrap();
            for (a, b) in m.probs().iter().zip(p(&ctx).probs()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(worst <= 1e-12, format!("max |marginal - target| = {worst:.2e}"))
}

fn expected_length_mc() -> Outcome {
    let mut rng = SeededRng::new(2);
    let mut worst = 0.0f64;
    for alpha in [0.3, 0.6, 0.71, 0.9] {
        let mc = monte_carlo_expected_length(alpha, 5, 200_000, &mut rng).unwrap();
        let exact = expected_length(alpha, 5).unwrap();
        worst = worst.max((mc - exact).abs() / exact);
    }
    outcome(worst <= 0.02, format!("max relative error {:.3}%", worst * 100.0))
}

fn reference_numbers() -> Outcome {
    let expected = [2.42, 1.43, 1.64, 1.22, 3.06, 1.76, 2.72, 1.55];
    let rows = reproduce_reference_table(5).unwrap();
    let worst = rows.iter().zip(expected).map(|(r, e)| (r.computed_speedup - e).abs()).fold(0.0, f64::max);
    let got: Vec<String> = rows.iter().map(|r| format!("{:.2}", r.computed_speedup)).collect();
    outcome(worst <= 0.04, format!("[{}], max deviation {worst:.3}", got.join(", ")))
}

fn flops_model() -> Outcome {
    let a = flops_ratio(7e9, 160e6, 5, 3.0).unwrap();
    let b = flops_ratio(3e9, 80e6, 5, 4.3).unwrap();
    let mut rng = SeededRng::new(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x = FlopsInputs::new(
            1e6 + rng.uniform() * 1e10,
            1e3 + rng.uniform() * 1e8,
            rng.uniform() * 500.0,
            1.0 + rng.uniform() * 100.0,
            rng.range_inclusive(1, 10),
            1.0 + rng.uniform() * 5.0,
        );
        let s = total_update_flops(&x).unwrap();
        let u = total_update_flops_unsimplified(&x).unwrap();
        if s != 0.0 || u != 0.0 {
            worst = worst.max((s - u).abs() / s.abs().max(u.abs()));
        }
    }
    let pass = a == 18.75 && (b - 12.6).abs() <= 0.05 && worst <= 1e-9;
    outcome(pass, format!("ratios {a} and {b:.3}, simplified vs unsimplified max rel {worst:.1e}"))
}

fn gradients() -> Outcome {
    const STEP: f64 = 1e-5;
    let mut worst = 0.0f64;
    let mut instances = 0;
    for seed in 0..24u64 {
        let mut rng = SeededRng::new(500 + seed);
        let ordinary = rng.range_inclusive(2, 5) as u32;
        let v = Vocabulary::new(ordinary).unwrap();
        let window = rng.range_inclusive(1, 2);
        let hidden = rng.range_inclusive(1, 4);
        let tau = 0.5 + 1.5 * rng.uniform();
        let measure = [DistanceMeasure::Kl, DistanceMeasure::Rkl, DistanceMeasure::Jsd { beta: 0.05 + 0.9 * rng.uniform() }]
            [seed as usize % 3];
        let model = NeuralDraftModel::init(v, window, 3, hidden, 2.0, &mut rng).unwrap();
        let ctx: Vec<TokenId> =
            std::iter::once(v.bos()).chain((0..3).map(|_| TokenId(rng.range_inclusive(0, ordinary as usize - 1) as u32))).collect();
        let target =
            CategoricalDistribution::from_weights((0..v.total()).map(|_| rng.uniform() + 0.01).collect()).unwrap();
        let (_, grad) = model.loss_and_grad(&ctx, &target, measure, tau).unwrap();
        let loss = |m: &NeuralDraftModel| {
            let q = softmax_with_temperature(&m.forward(&ctx).unwrap(), tau).unwrap();
            osd_core::distill::divergence(&target, &q, measure).unwrap()
        };
        let mut m = model.clone();
        for (i, a) in grad.values().iter().enumerate() {
            let orig = m.params()[i];
            m.params_mut()[i] = orig + STEP;
            let up = loss(&m);
            m.params_mut()[i] = orig - STEP;
            let down = loss(&m);
            m.params_mut()[i] = orig;
            let n = (up - down) / (2.0 * STEP);
            if a.abs().max(n.abs()) > 1e-8 {
                worst = worst.max((a - n).abs() / a.abs().max(n.abs()));
            }
        }
        instances += 1;
    }
    outcome(worst <= 1e-4, format!("{instances} instances, worst relative error {worst:.1e}"))
}

fn stationary() -> Outcome {
    let mut spec = GrammarSpec::new("a", 11, 32);
    spec.eos_rate = 0.05;
    let target = build_target(&[spec.clone()]).unwrap();
    let trace = gen_cluster_trace(&[spec], 2000, (1, 4), &mut SeededRng::new(5)).unwrap();
    let draft = NeuralDraftModel::init(Vocabulary::new(32).unwrap(), 2, 16, 32, 1.0, &mut SeededRng::new(7)).unwrap();
    let mut deltas = Vec::new();
    for cfg in [engine_cfg(3), engine_cfg(3).static_draft()] {
        let mut e = OnlineEngine::new(vec![draft.clone()], ClusterRouter::single(), cfg).unwrap();
        let log = e.serve_stream(&target, trace.clone()).unwrap();
        let r: Vec<f64> = rolling_alpha(&log, 50).unwrap().values().collect();
        let (first, last) = quarters(&r);
        deltas.push(last - first);
    }
    let pass = deltas[0] >= 0.1 && deltas[1].abs() <= 0.03;
    outcome(pass, format!("online delta {:+.3}, static delta {:+.3}", deltas[0], deltas[1]))
}

fn shift() -> Outcome {
    let seed = 1;
    let specs = relabeled_specs(4, 100 + seed, 32, 8);
    let target = build_target(&specs).unwrap();
    let mut draft = NeuralDraftModel::init(Vocabulary::new(32).unwrap(), 2, 16, 32, 1.0, &mut SeededRng::new(seed)).unwrap();
    let mut rng = SeededRng::new(seed + 1000);
    let mut prompts = Vec::new();
    for s in &specs {
        prompts.extend(gen_prompts(&build_grammar(s).unwrap(), 20, (1, 4), &mut rng).unwrap());
    }
    let wc = DistillConfig { epochs: 2, rollout_len: 16, ..Default::default() };
    warmup(&mut draft, &target, &prompts, &wc, &mut rng).unwrap();
    let cfg = EngineConfig { update_epochs: 8, ..engine_cfg(seed) };
    let block = 200;
    let sched = ShiftSchedule { blocks: specs.iter().map(|s| (s.clone(), block)).collect() };
    let trace = gen_shift_trace(&sched, (1, 4), &mut SeededRng::new(seed + 7)).unwrap();
    let mut e = OnlineEngine::new(vec![draft], ClusterRouter::single(), cfg).unwrap();
    let log = e.serve_stream(&target, trace).unwrap();
    let r: Vec<f64> = rolling_alpha(&log, 100).unwrap().values().collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for b in 1..4 {
        let s = b * block;
        let pre = r[s - 1];
        let (at, low) = r[s..s + 30].iter().enumerate().fold((0, f64::INFINITY), |m, (i, &x)| if x < m.1 { (i, x) } else { m });
        let recovered = r[s + at..s + block].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (dip, gap) = (pre - low, pre - recovered);
        pass &= dip >= 0.05 && gap <= 0.03;
        parts.push(format!("dip {dip:.3} gap {gap:+.3}"));
    }
    outcome(pass, format!("boundaries: {}", parts.join("; ")))
}

fn no_forgetting() -> Outcome {
    let seed = 1;
    let specs = relabeled_specs(2, 100 + seed, 32, 8);
    let target = build_target(&specs).unwrap();
    let mut draft = NeuralDraftModel::init(Vocabulary::new(32).unwrap(), 2, 16, 32, 1.0, &mut SeededRng::new(seed)).unwrap();
    let mut rng = SeededRng::new(seed + 1000);
    let mut prompts = Vec::new();
    for s in &specs {
        prompts.extend(gen_prompts(&build_grammar(s).unwrap(), 100, (1, 4), &mut rng).unwrap());
    }
    let wc = DistillConfig { epochs: 8, rollout_len: 16, ..Default::default() };
    warmup(&mut draft, &target, &prompts, &wc, &mut rng).unwrap();
    let trace = gen_mix_trace(&specs[0], &specs[1], 400, 0.5, (1, 4), &mut SeededRng::new(seed + 7)).unwrap();
    let half = trace.len() / 2;
    let mut e = OnlineEngine::new(vec![draft], ClusterRouter::single(), engine_cfg(seed)).unwrap();
    let log = e.serve_stream(&target, trace).unwrap();
    let phases = |tag: &str| {
        let ra = rolling_alpha_where(&log, 100, |r| r.source_tag == tag).unwrap();
        let end1 = ra.series.iter().filter(|p| p.request_index < half).filter_map(|p| p.value).next_back().unwrap();
        let p2: Vec<f64> = ra.series.iter().filter(|p| p.request_index >= half).filter_map(|p| p.value).collect();
        (end1, p2)
    };
    let (a1, a2) = phases("source-a");
    let (b1, b2) = phases("source-b");
    let drift = a2.iter().map(|x| (x - a1).abs()).fold(0.0, f64::max);
    let rise = b2.last().unwrap() - b1;
    let pass = drift <= 0.05 && rise >= 0.05;
    outcome(pass, format!("source-1 max drift {drift:.3}, source-2 rise {rise:+.3}"))
}

fn final_params(log: &ServeLog, e: &OnlineEngine, draft: usize) -> (Vec<f64>, Vec<String>) {
    let digests = log.requests.iter().filter(|r| r.draft == Some(draft)).filter_map(|r| r.draft_digest.clone()).collect();
    (e.draft(draft).params().to_vec(), digests)
}

fn routing() -> Outcome {
    let v = Vocabulary::new(32).unwrap();
    let specs: Vec<GrammarSpec> = (0..2u32)
        .map(|i| {
            let mut s = GrammarSpec::new(format!("c{i}"), 40 + i as u64, 32).with_support(i * 16, 16);
            s.eos_rate = 0.05;
            s
        })
        .collect();
    let target = build_target(&specs).unwrap();
    let trace = gen_cluster_trace(&specs, 2000, (1, 4), &mut SeededRng::new(9)).unwrap();
    let drafts: Vec<NeuralDraftModel> =
        (0..2).map(|i| NeuralDraftModel::init(v, 2, 16, 32, 1.0, &mut SeededRng::new(70 + i)).unwrap()).collect();
    let router = ClusterRouter::single().with_default(None).with_route("c0", 0).with_route("c1", 1);
    let mut full = OnlineEngine::new(drafts.clone(), router.clone(), engine_cfg(3)).unwrap();
    let log = full.serve_stream(&target, trace.clone()).unwrap();
    let mut gains = Vec::new();
    for c in ["c0", "c1"] {
        let r: Vec<f64> = rolling_alpha_where(&log, 50, |x| x.cluster_id == c).unwrap().values().collect();
        let (first, last) = quarters(&r);
        gains.push(last - first);
    }
    let mut untouched = true;
    for (i, c) in ["c0", "c1"].into_iter().enumerate() {
        let own: Vec<TraceRecord> = trace.iter().filter(|r| r.cluster_id == c).cloned().collect();
        let mut alone = OnlineEngine::new(drafts.clone(), router.clone(), engine_cfg(3)).unwrap();
        let alone_log = alone.serve_stream(&target, own).unwrap();
        untouched &= final_params(&log, &full, i) == final_params(&alone_log, &alone, i);
        untouched &= alone.draft(1 - i).params() == drafts[1 - i].params();
    }
    let pass = gains.iter().all(|g| *g >= 0.1) && untouched;
    outcome(pass, format!("gains {:+.3} / {:+.3}, cross-cluster bit-identical: {untouched}", gains[0], gains[1]))
}

fn token_precision_recall() -> Outcome {
    let mut spec = GrammarSpec::new("sharp", 21, 24);
    spec.concentration = 0.03;
    spec.eos_rate = 0.05;
    let target = build_target(&[spec.clone()]).unwrap();
    let v = Vocabulary::new(24).unwrap();
    let before = NeuralDraftModel::init(v, 2, 16, 32, 1.0, &mut SeededRng::new(31)).unwrap();
    let mut after = before.clone();
    let prompts = gen_prompts(&build_grammar(&spec).unwrap(), 200, (1, 4), &mut SeededRng::new(32)).unwrap();
    let cfg = DistillConfig { epochs: 4, rollout_len: 16, ..Default::default() };
    let mut state = OptimizerState::new(cfg.optimizer);
    offline_distill(&mut after, &target, &prompts, &cfg, &mut state, &mut SeededRng::new(33)).unwrap();
    let trace = gen_cluster_trace(&[spec], 300, (1, 4), &mut SeededRng::new(34)).unwrap();
    let stats = |d: &NeuralDraftModel| {
        let mut e = OnlineEngine::new(vec![d.clone()], ClusterRouter::single(), engine_cfg(5).static_draft()).unwrap();
        token_stats(&e.serve_stream(&target, trace.clone()).unwrap())
    };
    let (sb, sa) = (stats(&before), stats(&after));
    let top = sa.top_n(10);
    let (pb, rb) = sb.mean_precision_recall(&top);
    let (pa, ra) = sa.mean_precision_recall(&top);
    let (pb, rb, pa, ra) = (pb.unwrap_or(0.0), rb.unwrap_or(0.0), pa.unwrap_or(0.0), ra.unwrap_or(0.0));
    outcome(pa > pb && ra > rb, format!("precision {pb:.3} -> {pa:.3}, recall {rb:.3} -> {ra:.3}"))
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        files.insert(path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap());
    }
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    std::fs::write(
        &config,
        "seed = 4\n[workload]\nrequests = 48\n[engine]\nwarmup_prompts = 8\n[distill]\nepochs = 1\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    let mut identical = true;
    let mut files = 0;
    for cmd in ["gen-workload", "warmup", "serve", "offline-distill", "analyze"] {
        let mut runs = Vec::new();
        for _ in 0..2 {
            let _ = std::fs::remove_dir_all(&out);
            let status = Command::new(env!("CARGO_BIN_EXE_osd"))
                .args([cmd, "--config"])
                .arg(&config)
                .arg("--out")
                .arg(&out)
                .status()
                .unwrap();
            assert!(status.success(), "osd {cmd} failed");
            runs.push(snapshot(&out));
        }
        files += runs[0].len();
        identical &= runs[0] == runs[1];
    }
    outcome(identical, format!("{files} files over 5 subcommands, byte-identical: {identical}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Duration); 11] = [
        ("exactness of the output marginal", exactness, Duration::from_secs(5)),
        ("expected length by Monte Carlo", expected_length_mc, Duration::from_secs(30)),
        ("reference speedup numbers", reference_numbers, Duration::from_secs(1)),
        ("FLOPs model", flops_model, Duration::from_secs(1)),
        ("distillation gradients", gradients, Duration::from_secs(10)),
        ("online learning on a stationary workload", stationary, Duration::from_secs(300)),
        ("distribution shift dip and recovery", shift, Duration::from_secs(300)),
        ("no forgetting on the masked mix", no_forgetting, Duration::from_secs(300)),
        ("multi-draft routing", routing, Duration::from_secs(300)),
        ("token precision and recall", token_precision_recall, Duration::from_secs(120)),
        ("determinism of CLI reports", determinism, Duration::from_secs(300)),
    ];
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let took = start.elapsed();
        let pass = o.pass && took <= budget;
        failed += usize::from(!pass);
        println!(
            "{} criterion {:>2} {name}: {} ({:.2?} of {:?})",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            took,
            budget
        );
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
