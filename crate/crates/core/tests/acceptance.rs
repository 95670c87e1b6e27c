//! End-to-end acceptance checks, one line per check.
//!
//! `cargo test -p rtt-bench-core --test acceptance [-- <name filter>...]`

use std::net::UdpSocket;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rtt_bench::bench::sim::ScriptedLink;
use rtt_bench::bench::{run_client, CycleConfig, LoopbackStub, MonotonicClock, RttSample, SampleClass, SimClock};
use rtt_bench::loadgen::{live_stress_workers, live_traffic_threads, start_cbr, CbrSink, CbrSpec, StressSpec};
use rtt_bench::metrics::{compute_stats, export_timeseries, import_timeseries, LatencyStats};
use rtt_bench::pubsub::{create_publisher, create_subscriber, open_socket_count, Endpoint, QosProfile};
use rtt_bench::rtconfig::{apply_current_thread, probe, Policy, RtProfile, ThreadSched};
use rtt_bench::runner::{
    self, free_loopback_endpoints, render_report, table_row, ExperimentConfig, RunOptions, RunSummary, TrafficConfig,
};
use rtt_bench::wire::{decode, encode, reassemble, Message, HEADER_LEN};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Outcome = Result<String, String>;

impl From<Outcome> for Verdict {
    fn from(o: Outcome) -> Self {
        match o {
            Ok(d) => Verdict::Pass(d),
            Err(d) => Verdict::Fail(d),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Check {
    name: &'static str,
    /// Hard runtime bound, if the check has one.
    limit: Option<Duration>,
    run: fn() -> Verdict,
}

const CHECKS: &[Check] = &[
    Check { name: "wire-round-trip", limit: Some(Duration::from_secs(5)), run: || wire_round_trip().into() },
    Check { name: "classification-oracle", limit: Some(Duration::from_secs(5)), run: || classification().into() },
    Check { name: "sample-count", limit: None, run: || sample_count().into() },
    Check { name: "keep-last-depth-1", limit: Some(Duration::from_secs(5)), run: || keep_last().into() },
    Check { name: "report-rows", limit: Some(Duration::from_secs(1)), run: || report_rows().into() },
    Check { name: "cbr-accuracy", limit: None, run: || cbr_accuracy().into() },
    Check { name: "stress-trend", limit: None, run: stress_trend },
    Check { name: "teardown-hygiene", limit: Some(Duration::from_secs(10)), run: || hygiene().into() },
    Check { name: "export-import", limit: Some(Duration::from_secs(10)), run: || export_import().into() },
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let (mut passed, mut failed, mut skipped) = (0, 0, 0);
    for check in CHECKS {
        if !filters.is_empty() && !filters.iter().any(|f| check.name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let verdict = panic::catch_unwind(AssertUnwindSafe(check.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::Fail(format!("panicked: {msg}"))
        });
        let took = started.elapsed();
        let verdict = match (verdict, check.limit) {
            (Verdict::Pass(d), Some(limit)) if took >= limit => {
                Verdict::Fail(format!("{d}; took {took:.2?}, limit {limit:?}"))
            }
            (v, _) => v,
        };
        let (tag, detail) = match &verdict {
            Verdict::Pass(d) => {
                passed += 1;
                ("PASS", d)
            }
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => {
                skipped += 1;
                ("SKIP", d)
            }
        };
        println!("{tag} {:<22} {detail} ({took:.2?})", check.name);
    }
    println!("acceptance: {passed} passed, {failed} failed, {skipped} skipped");
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

/// Fragment count by repeated subtraction of the chunk capacity.
fn fragments_by_subtraction(len: usize, max_datagram: usize) -> usize {
    let cap = max_datagram - HEADER_LEN;
    let (mut left, mut n) = (len, 1);
    while left > cap {
        left -= cap;
        n += 1;
    }
    n
}

fn wire_round_trip() -> Outcome {
    let mut cases = 0;
    for (i, len) in [0usize, 1, 500, 32_768, 131_072].into_iter().enumerate() {
        for md in [64usize, 512, 1400] {
            let msg = Message::with_pattern(1, 1000 + i as u64, len);
            let datagrams = encode(&msg, md).map_err(|e| format!("encode {len}@{md}: {e}"))?;
            ensure!(
                datagrams.len() == fragments_by_subtraction(len, md),
                "{len}@{md}: {} fragments, expected {}",
                datagrams.len(),
                fragments_by_subtraction(len, md)
            );
            ensure!(datagrams.iter().all(|d| d.len() <= md), "{len}@{md}: oversized datagram");
            let frames = datagrams.iter().map(|d| decode(d)).collect::<Result<Vec<_>, _>>();
            let frames = frames.map_err(|e| format!("decode {len}@{md}: {e}"))?;
            ensure!(reassemble(frames.iter().cloned()) == vec![msg.clone()], "{len}@{md}: in-order mismatch");
            ensure!(reassemble(frames.into_iter().rev()) == vec![msg], "{len}@{md}: reversed mismatch");
            cases += 1;
        }
    }
    let n = encode(&Message::with_pattern(1, 0, 32_768), 1400).map_err(|e| e.to_string())?.len();
    ensure!(n == 24, "32768 B at 1400 B gave {n} fragments");
    Ok(format!("{cases} size/datagram cases identical; 32768 B at 1400 B = {n} fragments"))
}

const LOSS_NS: u64 = 500_000_000;

/// Reply delays clustered on the deadline and loss boundaries.
fn scripted_delay(rng: &mut ChaCha8Rng, deadline_ns: u64) -> Option<u64> {
    let boundary = [
        0,
        1,
        deadline_ns - 1000,
        deadline_ns - 1,
        deadline_ns,
        deadline_ns + 1,
        deadline_ns + 999,
        deadline_ns + 1000,
        deadline_ns + 1001,
        LOSS_NS - 1,
        LOSS_NS,
        LOSS_NS + 1,
    ];
    match rng.gen_range(0..10) {
        0 => None,
        1..=3 => Some(boundary[rng.gen_range(0..boundary.len())]),
        4..=8 => Some(rng.gen_range(0..2 * deadline_ns)),
        _ => Some(rng.gen_range(0..LOSS_NS + LOSS_NS / 5)),
    }
}

/// Expected (rtt_us, class) from the raw delay, comparing in nanoseconds.
fn brute_force(delay: Option<u64>, deadline_us: u64) -> (Option<u64>, SampleClass) {
    match delay {
        Some(d) if d <= LOSS_NS => {
            let class = if d >= (deadline_us + 1) * 1000 { SampleClass::MissedDeadline } else { SampleClass::Ok };
            (Some(d / 1000), class)
        }
        _ => (None, SampleClass::Lost),
    }
}

fn classification() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x00c1_a551);
    // (period, deadline) in microseconds; 2500 pings each.
    let groups = [(10_000u64, 10_000u64), (10_000, 3_000), (2_000, 1_000), (20_000, 20_000)];
    let (mut pairs, mut disagreements) = (0usize, 0usize);
    let mut seen = [0usize; 3];
    for (period_us, deadline_us) in groups {
        let script: Vec<Option<u64>> = (0..2500).map(|_| scripted_delay(&mut rng, deadline_us * 1000)).collect();
        // Long enough for every scripted ping to be sent.
        let busy: u64 = script.iter().map(|d| d.unwrap_or(LOSS_NS).min(LOSS_NS) + period_us * 1000).sum();
        let cfg = CycleConfig {
            period: Duration::from_micros(period_us),
            deadline: Duration::from_micros(deadline_us),
            loss_timeout: Duration::from_nanos(LOSS_NS),
            duration: Duration::from_nanos(busy),
            warmup: Duration::ZERO,
            ..Default::default()
        };
        cfg.validate().map_err(|e| e.to_string())?;
        let clock = SimClock::new(1_000_000_000);
        let mut link = ScriptedLink::new(clock.clone(), script.clone());
        let run = run_client(&cfg, &clock, &mut link, &mut ());
        ensure!(run.samples.len() >= script.len(), "only {} samples for {} pings", run.samples.len(), script.len());
        for (s, &delay) in run.samples.iter().zip(&script) {
            let (rtt, class) = brute_force(delay, deadline_us);
            let t2_ok = match rtt {
                Some(_) => s.t2_ns == Some(s.t1_ns + delay.unwrap_or_default()),
                None => s.t2_ns.is_none(),
            };
            if s.rtt_us != rtt || s.class != class || !t2_ok {
                disagreements += 1;
            }
            seen[match class {
                SampleClass::Ok => 0,
                SampleClass::MissedDeadline => 1,
                SampleClass::Lost => 2,
            }] += 1;
            pairs += 1;
        }
    }
    ensure!(pairs == 10_000, "replayed {pairs} pairs");
    ensure!(disagreements == 0, "{disagreements} disagreements in {pairs} pairs");
    ensure!(seen.iter().all(|&n| n > 0), "class coverage {seen:?}");
    Ok(format!("{pairs} pairs, 0 disagreements (ok {}, missed {}, lost {})", seen[0], seen[1], seen[2]))
}

fn sample_count() -> Outcome {
    let cfg = CycleConfig { duration: Duration::from_secs(60), warmup: Duration::ZERO, ..Default::default() };
    let steal_before = steal_ms();
    // The cycle thread runs as it would under the RT profile when the host allows it.
    let (run, sched) = thread::spawn(move || {
        let (_, sched) = apply_current_thread(ThreadSched::fifo(80));
        let mut link = LoopbackStub::new(MonotonicClock, Duration::from_micros(200));
        (run_client(&cfg, &MonotonicClock, &mut link, &mut ()), sched)
    })
    .join()
    .map_err(|_| "cycle thread panicked".to_string())?;
    let count = |c: SampleClass| run.samples.iter().filter(|s| s.class == c).count();
    let (ok, missed, lost) = (count(SampleClass::Ok), count(SampleClass::MissedDeadline), count(SampleClass::Lost));
    let c = &run.counters;
    let stolen = steal_ms().zip(steal_before).map(|(a, b)| format!(", {} ms CPU steal", a - b)).unwrap_or_default();
    ensure!(
        run.samples.len() == 6001,
        "{} samples; {} cycles skipped at a late wakeup, {} expired behind an outstanding ping ({sched}{stolen})",
        run.samples.len(),
        c.skipped_cycles,
        c.deferred_cycles
    );
    ensure!(ok + missed + lost == 6001, "ok {ok} + missed {missed} + lost {lost} != 6001");
    Ok(format!("6001 samples: ok {ok}, missed {missed}, lost {lost} ({sched})"))
}

/// Hypervisor steal time so far, from the aggregate line of /proc/stat.
fn steal_ms() -> Option<u64> {
    let stat = std::fs::read_to_string("/proc/stat").ok()?;
    let ticks: u64 = stat.lines().next()?.split_whitespace().nth(8)?.parse().ok()?;
    // SAFETY: sysconf has no preconditions.
    let hz = unsafe { libc::sysconf(libc::_SC_CLK_TCK) }.max(1) as u64;
    Some(ticks * 1000 / hz)
}

fn wait_for(mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + Duration::from_secs(2);
    while Instant::now() < deadline {
        if f() {
            return true;
        }
        thread::sleep(Duration::from_millis(1));
    }
    f()
}

/// Holds the callback inside seq 0 while seq 1..=k arrive, then returns
/// what the callback saw after release.
fn observed_after_block(k: u64) -> Result<Vec<u64>, String> {
    let port = UdpSocket::bind("127.0.0.1:0").and_then(|s| s.local_addr()).map_err(|e| e.to_string())?.port();
    let ep = Endpoint::localhost(port).map_err(|e| e.to_string())?;
    let qos = QosProfile::keep_last(1).map_err(|e| e.to_string())?;
    let (entered_tx, entered_rx) = mpsc::channel();
    let (release_tx, release_rx) = mpsc::channel::<()>();
    let release_rx = Mutex::new(release_rx);
    let seen = Arc::new(Mutex::new(Vec::new()));
    let s2 = Arc::clone(&seen);
    let sub = create_subscriber(9, ep, qos, move |m: &Message| {
        if m.seq == 0 {
            let _ = entered_tx.send(());
            let _ = release_rx.lock().unwrap().recv();
        } else {
            s2.lock().unwrap().push(m.seq);
        }
    })
    .map_err(|e| e.to_string())?;
    let mut publisher = create_publisher(9, ep, qos).map_err(|e| e.to_string())?;
    publisher.publish(&Message::with_pattern(9, 0, 64)).map_err(|e| e.to_string())?;
    entered_rx.recv_timeout(Duration::from_secs(2)).map_err(|_| "callback never entered".to_string())?;
    for seq in 1..=k {
        publisher.publish(&Message::with_pattern(9, seq, 64)).map_err(|e| e.to_string())?;
    }
    ensure!(wait_for(|| sub.stats().completed == k + 1), "k = {k}: receiver saw {:?}", sub.stats());
    release_tx.send(()).map_err(|e| e.to_string())?;
    wait_for(|| !seen.lock().unwrap().is_empty());
    thread::sleep(Duration::from_millis(20));
    sub.shutdown();
    let out = seen.lock().unwrap().clone();
    Ok(out)
}

fn keep_last() -> Outcome {
    for k in 2..=10 {
        let got = observed_after_block(k)?;
        ensure!(got == vec![k], "k = {k}: observed {got:?}");
    }
    Ok("newest only for k = 2..=10".into())
}

fn report_rows() -> Outcome {
    let stats = |min, avg, max, missed, lost, total| LatencyStats {
        min_us: Some(min),
        avg_us: Some(avg),
        max_us: Some(max),
        missed,
        lost,
        total,
        ..Default::default()
    };
    let cases = [
        (stats(810, 2524, 29_481, 233, 0, 56_297), "810 | 2524 | 29481 | 233/56297 | 0/56297"),
        (stats(769, 1197, 1823, 0, 0, 60_001), "769 | 1197 | 1823 | 0/60001 | 0/60001"),
    ];
    for (s, want) in &cases {
        let row = table_row(s);
        ensure!(row == *want, "row {row:?}, expected {want:?}");
    }
    let runs: Vec<RunSummary> = cases
        .iter()
        .map(|(s, _)| RunSummary { id: "dds1".into(), description: None, rt_verified: false, stats: s.clone() })
        .collect();
    let report = render_report(&runs);
    let rows: Vec<&str> = report.lines().filter(|l| cases.iter().any(|(_, w)| l == w)).collect();
    ensure!(rows.len() == 2, "report holds {} exact rows:\n{report}", rows.len());
    Ok("2 rows byte-exact".into())
}

fn cbr_accuracy() -> Outcome {
    const SECS: u64 = 10;
    let mut detail = Vec::new();
    for rate in [1_000_000u64, 40_000_000, 80_000_000] {
        let mut sink = CbrSink::bind("127.0.0.1:0".parse().unwrap()).map_err(|e| e.to_string())?;
        let spec = CbrSpec { duration: Some(Duration::from_secs(SECS)), ..CbrSpec::new(rate, sink.local()) };
        let mut flow = start_cbr(&spec).map_err(|e| e.to_string())?;
        let deadline = Instant::now() + Duration::from_secs(SECS + 5);
        while !flow.is_finished() && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(50));
        }
        let sent = flow.stop();
        thread::sleep(Duration::from_millis(100));
        let got = sink.stop();

        // Packets whose send offset falls inside the window.
        let bits = spec.packet_size as u64 * 8;
        let expected_packets = (SECS * rate).div_ceil(bits);
        ensure!(
            sent.packets.abs_diff(expected_packets) <= 1,
            "{rate} bps: sent {} packets, expected {expected_packets}",
            sent.packets
        );
        let by_bytes = got.bytes as f64 * 8.0 / SECS as f64;
        let measured = got.rate_bps.ok_or(format!("{rate} bps: sink saw {} packets", got.packets))?;
        for (what, value) in [("sink rate", measured), ("byte count", by_bytes)] {
            let err = (value - rate as f64).abs() / rate as f64;
            ensure!(err <= 0.05, "{rate} bps: {what} {value:.0} bps is {:.1}% off", err * 100.0);
        }
        detail.push(format!("{} Mbps -> {:.2}", rate / 1_000_000, measured / 1e6));
    }
    Ok(detail.join(", "))
}

fn stressed(id: &str, rt: Option<RtProfile>) -> Result<ExperimentConfig, String> {
    let mut c = ExperimentConfig::loopback(id);
    c.cycle.duration = Duration::from_secs(120);
    c.stress = Some(StressSpec::uniform(2));
    c.rt = rt;
    c.endpoints = free_loopback_endpoints().map_err(|e| e.to_string())?;
    Ok(c)
}

fn stress_trend() -> Verdict {
    let caps = probe();
    if !caps.can_fifo {
        return Verdict::Skip("SCHED_FIFO not available to this process".into());
    }
    let run = || -> Outcome {
        let out = tempfile::tempdir().map_err(|e| e.to_string())?;
        let opts = RunOptions { output_dir: Some(out.path().to_path_buf()), ..Default::default() };
        let plain = runner::run(&stressed("trend.no-rt", None)?, &opts).map_err(|e| e.to_string())?;
        let rt = runner::run(&stressed("trend.rt", Some(RtProfile::default()))?, &opts).map_err(|e| e.to_string())?;
        let max = |s: &LatencyStats| s.max_us.unwrap_or(0);
        let line = |r: &runner::RunResult| {
            format!("{} [{}]", table_row(&r.stats), if r.rt_verified { "RT" } else { "not RT" })
        };
        let detail = format!("without RT {}; with RT {}", line(&plain), line(&rt));
        ensure!(rt.rt_verified, "RT profile not fully applied: {detail}");
        ensure!(max(&plain.stats) >= max(&rt.stats), "max ordering violated: {detail}");
        ensure!(plain.stats.missed >= rt.stats.missed, "missed ordering violated: {detail}");
        Ok(detail)
    };
    run().into()
}

fn counters() -> (usize, usize, usize) {
    (live_stress_workers(), live_traffic_threads(), open_socket_count())
}

fn hygiene() -> Outcome {
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = RunOptions { output_dir: Some(out.path().to_path_buf()), ..Default::default() };
    let mut cfg = ExperimentConfig::loopback("hygiene");
    cfg.cycle.duration = Duration::from_secs(1);
    cfg.cycle.warmup = Duration::from_millis(200);
    cfg.cycle.loss_timeout = Duration::from_millis(500);
    cfg.stress = Some(StressSpec { vm_bytes: 4 << 20, hdd_bytes: 1 << 20, ..StressSpec::uniform(1) });
    cfg.traffic = Some(TrafficConfig { rate: 2_000_000, packet_size: 1250, rate_cap: None, bidirectional: true });
    cfg.endpoints = free_loopback_endpoints().map_err(|e| e.to_string())?;
    runner::run(&cfg, &opts).map_err(|e| e.to_string())?;
    ensure!(counters() == (0, 0, 0), "after normal run (workers, traffic, sockets) = {:?}", counters());

    // A kernel-thread pattern that matches nothing cannot be applied.
    cfg.rt = Some(RtProfile {
        policy: Policy::Other,
        lock_memory: false,
        softirq_prio: Some(10),
        softirq_pattern: "^no-such-kernel-thread$".into(),
        ..RtProfile::default()
    });
    let strict = RunOptions { strict_rt: true, ..opts };
    ensure!(runner::run(&cfg, &strict).is_err(), "strict run was not aborted");
    ensure!(counters() == (0, 0, 0), "after strict abort (workers, traffic, sockets) = {:?}", counters());
    Ok("nothing left after a loaded run and a strict-RT abort".into())
}

fn export_import() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0e8b_0a7e);
    let mut rows = 0;
    for i in 0..100 {
        let period_us = rng.gen_range(1_000..=20_000u64);
        let deadline_us = rng.gen_range(100..=period_us);
        let cfg = CycleConfig {
            period: Duration::from_micros(period_us),
            deadline: Duration::from_micros(deadline_us),
            loss_timeout: Duration::from_nanos(LOSS_NS),
            duration: Duration::from_secs(rng.gen_range(1..=10)),
            warmup: Duration::from_millis(rng.gen_range(0..=200)),
            ..Default::default()
        };
        let script: Vec<Option<u64>> = (0..2000).map(|_| scripted_delay(&mut rng, deadline_us * 1000)).collect();
        let clock = SimClock::new(rng.gen_range(0..1u64 << 50));
        let mut link = ScriptedLink::new(clock.clone(), script);
        let samples: Vec<RttSample> = run_client(&cfg, &clock, &mut link, &mut ()).samples;

        let stored = toml::to_string(&compute_stats(&samples)).map_err(|e| e.to_string())?;
        let stored: LatencyStats = toml::from_str(&stored).map_err(|e| e.to_string())?;
        let mut csv = Vec::new();
        rows += export_timeseries(&samples, &mut csv).map_err(|e| e.to_string())?;
        let back = import_timeseries(csv.as_slice()).map_err(|e| format!("run {i}: {e}"))?;
        // Import rebuilds t2 at microsecond resolution, so compare the recorded columns.
        let columns = |v: &[RttSample]| v.iter().map(|s| (s.seq, s.t1_ns, s.rtt_us, s.class)).collect::<Vec<_>>();
        ensure!(columns(&back) == columns(&samples), "run {i}: imported rows differ");
        ensure!(compute_stats(&back) == stored, "run {i}: re-aggregated stats differ");
    }
    Ok(format!("100 runs, {rows} rows, stats identical"))
}
