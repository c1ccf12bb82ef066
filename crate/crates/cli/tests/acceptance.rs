//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wtfpad::baselines::{buflo, tamaraw, BufloParams, TamarawParams};
use wtfpad::evaluation::{
    closed_world_eval, evaluate_corpus, monitored_split, permute_labels, roc_binarized, spearman, Dataset, EvalConfig,
};
use wtfpad::fitting::{
    empirical_quantile, fit_mle, materialize_histograms, split_burst_gap, tune, FitFamily, MaterializeParams, Threshold,
};
use wtfpad::histograms::{Delay, HistogramSet, Rounding, TokenHistogram};
use wtfpad::padding::{EndpointConfig, MachineAction, MachineEvent, MachineRole, Mode, PaddingMachine};
use wtfpad::simulator::{corpus_overheads, median, overheads, simulate, simulate_corpus, LinkModel};
use wtfpad::traces::{synth_corpus, Corpus, SynthParams};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn histograms(corpus: &Corpus, family: FitFamily, percentile: f64, seed: u64) -> HistogramSet {
    let split = split_burst_gap(corpus, 2, Threshold::Auto).unwrap();
    let params = MaterializeParams { family, percentile, ..Default::default() };
    materialize_histograms(&split, &params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().histograms
}

fn pad(corpus: &Corpus, set: &HistogramSet, seed: u64) -> Corpus {
    let client = EndpointConfig::client(set.clone());
    let bridge = EndpointConfig::bridge(set.clone());
    simulate_corpus(corpus, &client, &bridge, LinkModel::default(), seed).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let corpus = synth_corpus(50, 20, &SynthParams::default(), 101).unwrap();
    let set = histograms(&corpus, FitFamily::Normal, 0.4, 1);
    let padded = pad(&corpus, &set, 2);
    let mut moved = 0usize;
    let mut checked = 0usize;
    for (raw, out) in corpus.traces.iter().zip(&padded.traces) {
        let reals: Vec<_> = out.events().iter().filter(|e| e.is_real()).collect();
        if reals.len() != raw.len() {
            moved += raw.len();
            continue;
        }
        for (a, b) in raw.events().iter().zip(reals) {
            checked += 1;
            if a.time.to_bits() != b.time.to_bits() {
                moved += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        moved == 0 && elapsed < Duration::from_secs(60),
        format!("{} traces, {checked} real packets, {moved} moved, {:.1}s", corpus.len(), elapsed.as_secs_f64()),
    )
}

fn uniform(finite: u64, bins: usize) -> TokenHistogram {
    let mut tokens = vec![0u64; bins];
    for i in 0..finite as usize {
        tokens[i % (bins - 1)] += 1;
    }
    TokenHistogram::from_tokens(1.0, tokens).unwrap()
}

fn criterion_2() -> Outcome {
    let mut ceiling = uniform(300, 20).with_rounding(Rounding::Ceiling);
    let kc = ceiling.set_infinity_tokens_burst(0.1).unwrap();
    let kn = uniform(300, 20).set_infinity_tokens_burst(0.1).unwrap();
    let expected = (300 + kc + 1) as f64 / (kc + 1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trials = 100_000u64;
    let mut total = 0u64;
    for _ in 0..trials {
        ceiling.refill();
        loop {
            total += 1;
            let d = ceiling.sample_delay(&mut rng).unwrap();
            ceiling.consume_token(d);
            if d == Delay::Infinite {
                break;
            }
        }
    }
    let mc = total as f64 / trials as f64;
    let rel = (mc - expected).abs() / expected;
    check(
        kc == 34 && kn == 33 && rel < 0.02,
        format!("k_n ceiling={kc} nearest={kn}; E[L] {mc:.3} vs {expected:.3} ({:.2}%)", rel * 100.0),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 100_000u64;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let mut tokens: Vec<u64> = (0..15).map(|_| rng.random_range(0..60)).collect();
        tokens[0] += 1;
        let h = TokenHistogram::from_tokens(2.0, tokens.clone()).unwrap();
        let total: u64 = tokens.iter().sum();
        let mut counts = vec![0u64; tokens.len()];
        for _ in 0..draws {
            let i = match h.sample_delay(&mut rng).unwrap() {
                Delay::Infinite => tokens.len() - 1,
                Delay::Finite(t) => h.bin_index(t).unwrap(),
            };
            counts[i] += 1;
        }
        for (&k, &c) in tokens.iter().zip(&counts) {
            let p = k as f64 / total as f64;
            let sd = (draws as f64 * p * (1.0 - p)).sqrt();
            let dev = (c as f64 - draws as f64 * p).abs();
            let z = if sd > 0.0 {
                dev / sd
            } else if dev == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(z);
        }
    }
    check(worst <= 3.0, format!("largest deviation {worst:.2} sigma over 10 histograms"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0usize;
    let mut refills = 0usize;
    for _ in 0..10_000 {
        let mut tokens: Vec<u64> = (0..10).map(|_| rng.random_range(0..5)).collect();
        if tokens.iter().all(|&k| k == 0) {
            tokens[9] = 1;
        }
        let initial: u64 = tokens.iter().sum();
        let mut h = TokenHistogram::from_tokens(8.0, tokens.clone()).unwrap();
        for _ in 0..rng.random_range(1..80) {
            let before = h.total_tokens();
            let is_return = rng.random_bool(0.3);
            let c = if is_return {
                h.return_token(rng.random_range(0.0..12.0), rng.random_range(0.0..12.0))
            } else if rng.random_bool(0.15) {
                h.consume_token(Delay::Infinite)
            } else {
                h.consume_token(Delay::Finite(rng.random_range(0.0..12.0)))
            };
            let after = h.total_tokens();
            let ok = if c.refilled {
                refills += 1;
                after == initial - 1
            } else if is_return {
                after == before
            } else {
                after + 1 == before
            };
            if !ok || h.initial_tokens() != tokens.as_slice() {
                violations += 1;
            }
        }
        h.refill();
        if h.tokens() != tokens.as_slice() {
            violations += 1;
        }
    }
    check(violations == 0, format!("10000 sequences, {refills} refills, {violations} violations"))
}

fn finite_or_infinite(finite: bool) -> TokenHistogram {
    let tokens = if finite { vec![0, 0, 10, 0, 0] } else { vec![0, 0, 0, 0, 10] };
    TokenHistogram::from_tokens(16.0, tokens).unwrap()
}

fn trigger_of(role: MachineRole) -> MachineEvent {
    match role {
        MachineRole::Send => MachineEvent::PushReal,
        MachineRole::Receive => MachineEvent::Receive,
    }
}

/// A machine in `mode` whose histograms are then swapped for the variant
/// under test.
fn machine_in(role: MachineRole, mode: Mode, burst_finite: bool, gap_finite: bool) -> PaddingMachine {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = PaddingMachine::new(role, finite_or_infinite(true), finite_or_infinite(true));
    if mode != Mode::Idle {
        m.step(trigger_of(role), 0.0, &mut rng).unwrap();
    }
    if mode == Mode::Gap {
        let t = m.deadline().unwrap();
        m.step(MachineEvent::TimeoutExpired, t, &mut rng).unwrap();
    }
    assert_eq!(m.mode(), mode);
    m.set_histograms(finite_or_infinite(burst_finite), finite_or_infinite(gap_finite));
    m
}

#[derive(Debug, PartialEq)]
enum Expect {
    Invalid,
    Next { mode: Mode, actions: Vec<&'static str> },
}

/// The transition table, written out independently of the implementation.
fn expected(role: MachineRole, mode: Mode, event: MachineEvent, burst_finite: bool, gap_finite: bool) -> Expect {
    let trigger = match role {
        MachineRole::Send => event == MachineEvent::PushReal,
        MachineRole::Receive => matches!(event, MachineEvent::Receive | MachineEvent::StartOfTransmission),
    };
    let real: Vec<&'static str> = if trigger && role == MachineRole::Send { vec!["real"] } else { vec![] };
    let next = |mode, actions| Expect::Next { mode, actions };
    if event == MachineEvent::EndOfSession {
        return next(Mode::Idle, if mode == Mode::Idle { vec![] } else { vec!["cancel"] });
    }
    match (mode, trigger, event) {
        (Mode::Idle, true, _) => {
            let mut a = real;
            if burst_finite {
                a.push("timer");
                next(Mode::Burst, a)
            } else {
                next(Mode::Idle, a)
            }
        }
        (Mode::Burst | Mode::Gap, true, _) => {
            let mut a = real;
            if burst_finite {
                a.push("timer");
                next(Mode::Burst, a)
            } else {
                a.push("cancel");
                next(Mode::Idle, a)
            }
        }
        (Mode::Burst | Mode::Gap, false, MachineEvent::TimeoutExpired) => {
            if gap_finite {
                next(Mode::Gap, vec!["dummy", "timer"])
            } else if burst_finite {
                next(Mode::Burst, vec!["dummy", "timer"])
            } else {
                next(Mode::Idle, vec!["dummy"])
            }
        }
        _ => Expect::Invalid,
    }
}

fn criterion_5() -> Outcome {
    let events = [
        MachineEvent::PushReal,
        MachineEvent::Receive,
        MachineEvent::TimeoutExpired,
        MachineEvent::StartOfTransmission,
        MachineEvent::EndOfSession,
    ];
    let mut cases = 0usize;
    let mut mismatches = Vec::new();
    for role in [MachineRole::Send, MachineRole::Receive] {
        for mode in [Mode::Idle, Mode::Burst, Mode::Gap] {
            for event in events {
                for (bf, gf) in [(true, true), (true, false), (false, true), (false, false)] {
                    cases += 1;
                    let mut m = machine_in(role, mode, bf, gf);
                    let now = m.deadline().unwrap_or(0.0);
                    let got = match m.step(event, now, &mut ChaCha8Rng::seed_from_u64(1)) {
                        Err(_) => Expect::Invalid,
                        Ok(actions) => Expect::Next {
                            mode: m.mode(),
                            actions: actions
                                .iter()
                                .map(|a| match a {
                                    MachineAction::SendReal => "real",
                                    MachineAction::SendDummy => "dummy",
                                    MachineAction::SetTimer(_) => "timer",
                                    MachineAction::CancelTimer => "cancel",
                                })
                                .collect(),
                        },
                    };
                    let want = expected(role, mode, event, bf, gf);
                    if got != want {
                        mismatches.push(format!("{role:?}/{mode:?}/{event:?}/{bf}/{gf}: {got:?} vs {want:?}"));
                    }
                }
            }
        }
    }

    let corpus = synth_corpus(5, 4, &SynthParams::default(), 55).unwrap();
    let set = histograms(&corpus, FitFamily::LogNormal, 0.01, 5);
    let (client, bridge) = (EndpointConfig::client(set.clone()), EndpointConfig::bridge(set));
    let mut stopped = 0usize;
    for seed in 0..1000u64 {
        let trace = &corpus.traces[(seed % corpus.len() as u64) as usize];
        if simulate(trace, &client, &bridge, LinkModel::default(), seed).is_ok() {
            stopped += 1;
        }
    }
    check(
        mismatches.is_empty() && stopped == 1000,
        format!(
            "{cases} transitions, {} mismatches{}; soft stop in {stopped}/1000 sessions",
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default()
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let samples: Vec<f64> = (0..500).map(|_| rng.random_range(0.01f64..1.0).powi(3)).collect();
    let fit = fit_mle(&samples, FitFamily::LogNormal).unwrap();
    let same = tune(&fit, 0.5).unwrap();
    let identity = same.mu == fit.mu && same.sigma == fit.sigma;
    let mus: Vec<f64> = (1..=20).map(|i| tune(&fit, i as f64 * 0.025).unwrap().mu).collect();
    let increasing = mus.windows(2).all(|w| w[0] < w[1]);

    let corpus = synth_corpus(10, 10, &SynthParams::default(), 66).unwrap();
    let median_burst = |p: f64| {
        let set = histograms(&corpus, FitFamily::LogNormal, p, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draws: Vec<f64> = (0..20_000)
            .map(|_| match set.send_burst.sample_delay(&mut rng).unwrap() {
                Delay::Finite(t) => t,
                Delay::Infinite => f64::INFINITY,
            })
            .collect();
        empirical_quantile(&draws, 0.5).unwrap()
    };
    let (low, high) = (median_burst(0.1), median_burst(0.5));
    check(
        identity && increasing && low < high,
        format!("identity={identity} increasing={increasing}; median H_B delay p=0.1 {low:.4}s vs p=0.5 {high:.4}s"),
    )
}

const GRID: [f64; 7] = [0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.01];

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let corpus = synth_corpus(20, 20, &SynthParams::default(), 77).unwrap();
    let cfg = EvalConfig::default();
    let raw = closed_world_eval(&corpus, &cfg, 7).unwrap().accuracy;
    let mut overhead = Vec::new();
    let mut accuracy = Vec::new();
    for p in GRID {
        let padded = pad(&corpus, &histograms(&corpus, FitFamily::LogNormal, p, 7), 7);
        let bw: Vec<f64> = corpus_overheads(&corpus, &padded).unwrap().iter().map(|o| o.bandwidth_overhead).collect();
        overhead.push(median(&bw).unwrap());
        accuracy.push(closed_world_eval(&padded, &cfg, 7).unwrap().accuracy);
    }
    let rho = spearman(&GRID, &overhead).unwrap_or(0.0);
    let strongest = *accuracy.last().unwrap();
    let elapsed = start.elapsed();
    let table: Vec<String> =
        GRID.iter().zip(overhead.iter().zip(&accuracy)).map(|(p, (o, a))| format!("{p}:{o:.2}/{a:.2}")).collect();
    check(
        rho <= -0.9 && strongest <= 0.5 * raw && elapsed < Duration::from_secs(600),
        format!(
            "spearman {rho:.3}; accuracy raw {raw:.3} vs p=0.01 {strongest:.3}; p:overhead/accuracy {}; {:.1}s",
            table.join(" "),
            elapsed.as_secs_f64()
        ),
    )
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn criterion_8() -> Outcome {
    let cfg = EvalConfig::default();
    let mut gaps: [Vec<f64>; 3] = Default::default();
    for seed in 0..10u64 {
        let corpus = synth_corpus(20, 20, &SynthParams::default(), 800 + seed).unwrap();
        let raw = evaluate_corpus(&corpus, &cfg, seed).unwrap();
        let padded = pad(&corpus, &histograms(&corpus, FitFamily::Normal, 0.4, seed), seed);
        let prot = evaluate_corpus(&padded, &cfg, seed).unwrap();
        let auc = |r: &wtfpad::evaluation::EvalReport| (r.roc.as_ref().unwrap().auc, r.proc.as_ref().unwrap().auc);
        let ((ra, rp), (pa, pp)) = (auc(&raw), auc(&prot));
        gaps[0].push(raw.accuracy - prot.accuracy);
        gaps[1].push(ra - pa);
        gaps[2].push(rp - pp);
    }
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, g) in ["accuracy", "roc_auc", "proc_auc"].iter().zip(&gaps) {
        let (m, sd) = mean_sd(g);
        let se = sd / (g.len() as f64).sqrt();
        let z = if se > 0.0 {
            m / se
        } else if m > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        ok &= m > 0.0 && z >= 3.0;
        parts.push(format!("{name} gap {m:.3} (z={z:.1})"));
    }
    check(ok, format!("10 seeds: {}", parts.join(", ")))
}

fn criterion_9() -> Outcome {
    let corpus = synth_corpus(10, 10, &SynthParams::default(), 99).unwrap();
    let tp = TamarawParams::default();
    let padded = pad(&corpus, &histograms(&corpus, FitFamily::Normal, 0.4, 9), 9);
    let wtf_zero = corpus_overheads(&corpus, &padded).unwrap().iter().all(|o| o.latency_overhead == 0.0);
    let mut b_lat = Vec::new();
    let mut t_lat = Vec::new();
    let mut not_multiple = 0usize;
    for t in &corpus.traces {
        let b = buflo(t, &BufloParams::default()).unwrap();
        let tm = tamaraw(t, &tp).unwrap();
        b_lat.push(overheads(t, &b).unwrap().latency_overhead);
        t_lat.push(overheads(t, &tm).unwrap().latency_overhead);
        let mut per_dir: BTreeMap<_, u32> = BTreeMap::new();
        for e in tm.events() {
            *per_dir.entry(e.direction).or_default() += 1;
        }
        not_multiple += per_dir.values().filter(|&&c| c % tp.pad_multiple != 0).count();
    }
    let all_positive = |v: &[f64]| v.iter().all(|&x| x > 0.0);
    check(
        wtf_zero && all_positive(&b_lat) && all_positive(&t_lat) && not_multiple == 0,
        format!(
            "median latency overhead BuFLO {:.3}, Tamaraw {:.3}, WTF-PAD all zero={wtf_zero}; Tamaraw directions off-multiple: {not_multiple}",
            median(&b_lat).unwrap(),
            median(&t_lat).unwrap()
        ),
    )
}

fn criterion_10() -> Outcome {
    let corpus = synth_corpus(20, 20, &SynthParams::default(), 1010).unwrap();
    let cfg = EvalConfig::default();
    let shuffled = permute_labels(&corpus, 10);
    let acc = closed_world_eval(&shuffled, &cfg, 10).unwrap().accuracy;
    let chance = 1.0 / 20.0;
    let sd = (chance * (1.0 - chance) / corpus.len() as f64).sqrt();

    let (_, proc) = roc_binarized(&corpus, &cfg, 10).unwrap();
    let data = Dataset::from_corpus(&corpus, &cfg.features).unwrap();
    let monitored = monitored_split(data.names.len(), 10);
    let positives = data.labels.iter().filter(|&&l| monitored[l]).count();
    let fraction = positives as f64 / data.labels.len() as f64;
    check(
        (acc - chance).abs() <= 3.0 * sd && proc.baseline == fraction,
        format!(
            "shuffled accuracy {acc:.4} vs chance {chance:.4} +/- {:.4}; P-ROC baseline {} vs {positives}/{}",
            3.0 * sd,
            proc.baseline,
            data.labels.len()
        ),
    )
}

fn run_cli(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out =
        Command::new(env!("CARGO_BIN_EXE_wtfpad")).args(args).current_dir(cwd).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn criterion_11() -> Outcome {
    let runs: [&[&str]; 7] = [
        &["synth", "--pages", "6", "--instances", "10", "--seed", "11", "--out", "corpus"],
        &["synth", "--pages", "30", "--instances", "1", "--prefix", "bg", "--seed", "12", "--out", "bg"],
        &["fit", "--corpus", "corpus", "--seed", "11", "--out", "fit"],
        &[
            "simulate",
            "--corpus",
            "corpus",
            "--histograms",
            "fit/histograms.json",
            "--seed",
            "11",
            "--annotate",
            "--out",
            "padded",
        ],
        &["baseline", "--corpus", "corpus", "--seed", "11", "--out", "baselines"],
        &[
            "evaluate",
            "--corpus",
            "padded/traces",
            "--background",
            "bg",
            "--world-sizes",
            "0,15,30",
            "--folds",
            "5",
            "--seed",
            "11",
            "--out",
            "eval",
        ],
        &["sweep", "--corpus", "corpus", "--percentiles", "0.5,0.1", "--folds", "5", "--seed", "11", "--out", "sweep"],
    ];
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        for args in runs {
            run_cli(args, dir.path())?;
        }
    }
    let (a, b) = (snapshot(dirs[0].path()), snapshot(dirs[1].path()));
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    check(
        a.len() == b.len() && differing.is_empty() && a.len() > 100,
        format!("{} subcommands, {} files compared, {} differ", runs.len(), a.len(), differing.len()),
    )
}

fn main() {
    let criteria: [(usize, fn() -> Outcome); 11] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
        (11, criterion_11),
    ];
    let mut failed = 0;
    for (n, f) in criteria {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL ({detail})");
            }
        }
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
