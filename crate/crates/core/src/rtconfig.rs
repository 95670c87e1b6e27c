//! Real-time execution profile: scheduling policy and priorities for the
//! benchmark threads and kernel networking threads, plus memory locking.
//!
//! Every outcome is read back from the system. A setting that cannot be
//! applied leaves the previous state of that setting in place.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_ETH_IRQ_PATTERN: &str = r"^irq/\d+-(eth|enp|eno|ens|enx)";
pub const DEFAULT_SOFTIRQ_PATTERN: &str = r"^ksoftirqd/\d+$";

#[derive(Debug, Error)]
pub enum RtError {
    #[error("invalid RT profile: {0}")]
    InvalidProfile(String),
    #[error("strict RT mode: {setting} was {outcome}")]
    StrictDenied { setting: Setting, outcome: Outcome, report: AppliedReport },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    #[serde(alias = "FIFO")]
    Fifo,
    #[serde(alias = "OTHER")]
    Other,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Fifo => "FIFO",
            Policy::Other => "OTHER",
        })
    }
}

/// Scheduling class and priority of one thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadSched {
    pub policy: Policy,
    pub priority: u8,
}

impl ThreadSched {
    pub const NORMAL: ThreadSched = ThreadSched { policy: Policy::Other, priority: 0 };

    pub fn fifo(priority: u8) -> Self {
        Self { policy: Policy::Fifo, priority }
    }
}

impl fmt::Display for ThreadSched {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.policy {
            Policy::Fifo => write!(f, "FIFO/{}", self.priority),
            Policy::Other => f.write_str("OTHER"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RtProfile {
    #[serde(default = "default_policy")]
    pub policy: Policy,
    #[serde(default = "default_prio")]
    pub cycle_prio: u8,
    #[serde(default = "default_prio")]
    pub transport_prio: u8,
    #[serde(default = "default_true")]
    pub lock_memory: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eth_irq_prio: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub softirq_prio: Option<u8>,
    #[serde(default = "default_eth_pattern")]
    pub eth_irq_pattern: String,
    #[serde(default = "default_softirq_pattern")]
    pub softirq_pattern: String,
    /// Pin the cycle thread to this CPU.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_affinity: Option<usize>,
    #[serde(default)]
    pub strict: bool,
}

fn default_policy() -> Policy {
    Policy::Fifo
}
fn default_true() -> bool {
    true
}
fn default_prio() -> u8 {
    80
}
fn default_eth_pattern() -> String {
    DEFAULT_ETH_IRQ_PATTERN.to_string()
}
fn default_softirq_pattern() -> String {
    DEFAULT_SOFTIRQ_PATTERN.to_string()
}

impl Default for RtProfile {
    fn default() -> Self {
        Self {
            policy: Policy::Fifo,
            cycle_prio: 80,
            transport_prio: 80,
            lock_memory: true,
            eth_irq_prio: None,
            softirq_prio: None,
            eth_irq_pattern: default_eth_pattern(),
            softirq_pattern: default_softirq_pattern(),
            cpu_affinity: None,
            strict: false,
        }
    }
}

impl RtProfile {
    /// The kernel-thread ladder: Ethernet IRQ 90, executor 80, transport 80
    /// (the 70-80 range collapses to one knob), ksoftirqd 60.
    pub fn kernel_tuned() -> Self {
        Self { eth_irq_prio: Some(90), softirq_prio: Some(60), ..Self::default() }
    }

    pub fn cycle_sched(&self) -> ThreadSched {
        match self.policy {
            Policy::Fifo => ThreadSched::fifo(self.cycle_prio),
            Policy::Other => ThreadSched::NORMAL,
        }
    }

    pub fn transport_sched(&self) -> ThreadSched {
        match self.policy {
            Policy::Fifo => ThreadSched::fifo(self.transport_prio),
            Policy::Other => ThreadSched::NORMAL,
        }
    }

    /// Checks priority ranges and the ladder ordering
    /// `eth_irq > cycle >= transport > softirq`.
    pub fn validate(&self) -> Result<(), RtError> {
        let in_range = |name: &str, p: u8| {
            if (1..=99).contains(&p) {
                Ok(())
            } else {
                Err(RtError::InvalidProfile(format!("{name} priority {p} outside 1..=99")))
            }
        };
        if self.policy == Policy::Fifo {
            in_range("rt.cycle_prio", self.cycle_prio)?;
            in_range("rt.transport_prio", self.transport_prio)?;
        }
        if let Some(p) = self.eth_irq_prio {
            in_range("rt.eth_irq_prio", p)?;
        }
        if let Some(p) = self.softirq_prio {
            in_range("rt.softirq_prio", p)?;
        }
        if !ladder_holds(self.eth_irq_prio, self.cycle_prio, self.transport_prio, self.softirq_prio) {
            return Err(RtError::InvalidProfile(format!(
                "priority ladder violated: need eth_irq > cycle >= transport > softirq, got {:?} / {} / {} / {:?}",
                self.eth_irq_prio, self.cycle_prio, self.transport_prio, self.softirq_prio
            )));
        }
        Regex::new(&self.eth_irq_pattern).map_err(|e| RtError::InvalidProfile(format!("rt.eth_irq_pattern: {e}")))?;
        Regex::new(&self.softirq_pattern).map_err(|e| RtError::InvalidProfile(format!("rt.softirq_pattern: {e}")))?;
        Ok(())
    }
}

/// Ordering constraint between the four priority levels. Comparisons with
/// an unset kernel-thread priority are vacuous.
pub fn ladder_holds(eth_irq: Option<u8>, cycle: u8, transport: u8, softirq: Option<u8>) -> bool {
    eth_irq.is_none_or(|e| e > cycle) && cycle >= transport && softirq.is_none_or(|s| transport > s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    CyclePolicy,
    TransportPolicy,
    MemoryLock,
    EthIrqThreads,
    SoftirqThreads,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::CyclePolicy => "cycle thread policy",
            Setting::TransportPolicy => "transport thread policy",
            Setting::MemoryLock => "memory lock",
            Setting::EthIrqThreads => "ethernet IRQ threads",
            Setting::SoftirqThreads => "softirq threads",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Applied,
    Denied,
    Unsupported,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Applied => "APPLIED",
            Outcome::Denied => "DENIED",
            Outcome::Unsupported => "UNSUPPORTED",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettingReport {
    pub setting: Setting,
    pub outcome: Outcome,
    pub requested: String,
    /// Value read back from the system after the attempt.
    pub effective: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedReport {
    pub settings: Vec<SettingReport>,
}

impl AppliedReport {
    pub fn outcome(&self, setting: Setting) -> Option<Outcome> {
        self.settings.iter().find(|s| s.setting == setting).map(|s| s.outcome)
    }

    /// True when every requested setting was applied and the profile
    /// actually puts the benchmark threads in a real-time class.
    pub fn rt_verified(&self) -> bool {
        !self.settings.is_empty()
            && self.settings.iter().all(|s| s.outcome == Outcome::Applied)
            && self.outcome(Setting::CyclePolicy) == Some(Outcome::Applied)
            && self.settings.iter().any(|s| s.setting == Setting::CyclePolicy && s.effective.starts_with("FIFO"))
    }

    fn push(&mut self, setting: Setting, outcome: Outcome, requested: String, effective: String) {
        self.settings.push(SettingReport { setting, outcome, requested, effective });
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelThread {
    pub tid: i32,
    pub name: String,
}

/// Operating-system scheduling facilities. `tid` 0 means the calling thread.
pub trait SchedBackend: Send + Sync {
    fn set_sched(&self, tid: i32, sched: ThreadSched) -> io::Result<()>;
    fn get_sched(&self, tid: i32) -> io::Result<ThreadSched>;
    fn lock_memory(&self) -> io::Result<()>;
    fn unlock_memory(&self) -> io::Result<()>;
    /// Locked memory of this process, in KiB.
    fn locked_kib(&self) -> io::Result<u64>;
    fn kernel_threads(&self) -> io::Result<Vec<KernelThread>>;
}

/// Linux implementation over `sched_setscheduler`, `mlockall` and `/proc`.
#[derive(Debug, Clone)]
pub struct SystemBackend {
    proc_root: PathBuf,
}

impl Default for SystemBackend {
    fn default() -> Self {
        Self { proc_root: PathBuf::from("/proc") }
    }
}

impl SystemBackend {
    pub fn with_proc_root(proc_root: impl Into<PathBuf>) -> Self {
        Self { proc_root: proc_root.into() }
    }
}

fn check(rc: libc::c_int) -> io::Result<()> {
    if rc == -1 {
        Err(io::Error::last_os_error())
    } else {
        Ok(())
    }
}

pub(crate) fn set_thread_sched(tid: i32, sched: ThreadSched) -> io::Result<()> {
    let (policy, prio) = match sched.policy {
        Policy::Fifo => (libc::SCHED_FIFO, sched.priority as libc::c_int),
        Policy::Other => (libc::SCHED_OTHER, 0),
    };
    let param = libc::sched_param { sched_priority: prio };
    // SAFETY: param is a valid sched_param for the duration of the call.
    check(unsafe { libc::sched_setscheduler(tid, policy, &param) })
}

pub(crate) fn thread_sched(tid: i32) -> io::Result<ThreadSched> {
    // SAFETY: plain syscalls; param is written by the kernel.
    let policy = unsafe { libc::sched_getscheduler(tid) };
    if policy == -1 {
        return Err(io::Error::last_os_error());
    }
    let mut param = libc::sched_param { sched_priority: 0 };
    check(unsafe { libc::sched_getparam(tid, &mut param) })?;
    Ok(match policy {
        libc::SCHED_FIFO | libc::SCHED_RR => ThreadSched::fifo(param.sched_priority as u8),
        _ => ThreadSched::NORMAL,
    })
}

/// Kernel thread id of the calling thread.
pub fn current_tid() -> i32 {
    // SAFETY: gettid has no preconditions.
    unsafe { libc::syscall(libc::SYS_gettid) as i32 }
}

fn status_field(path: &Path, key: &str) -> io::Result<Option<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().find_map(|l| l.strip_prefix(key)).map(|v| v.trim().to_string()))
}

impl SchedBackend for SystemBackend {
    fn set_sched(&self, tid: i32, sched: ThreadSched) -> io::Result<()> {
        set_thread_sched(tid, sched)
    }

    fn get_sched(&self, tid: i32) -> io::Result<ThreadSched> {
        thread_sched(tid)
    }

    fn lock_memory(&self) -> io::Result<()> {
        // SAFETY: mlockall takes flags only.
        check(unsafe { libc::mlockall(libc::MCL_CURRENT | libc::MCL_FUTURE) })
    }

    fn unlock_memory(&self) -> io::Result<()> {
        // SAFETY: no arguments.
        check(unsafe { libc::munlockall() })
    }

    fn locked_kib(&self) -> io::Result<u64> {
        let v = status_field(&self.proc_root.join("self/status"), "VmLck:")?.unwrap_or_default();
        Ok(v.split_whitespace().next().and_then(|n| n.parse().ok()).unwrap_or(0))
    }

    fn kernel_threads(&self) -> io::Result<Vec<KernelThread>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.proc_root)? {
            let entry = entry?;
            let Some(pid) = entry.file_name().to_str().and_then(|s| s.parse::<i32>().ok()) else {
                continue;
            };
            let Ok(stat) = fs::read_to_string(entry.path().join("stat")) else {
                continue;
            };
            // "pid (comm) state ppid ..."; comm may contain spaces and parens.
            let (Some(open), Some(close)) = (stat.find('('), stat.rfind(')')) else {
                continue;
            };
            let name = stat[open + 1..close].to_string();
            let ppid = stat[close + 1..].split_whitespace().nth(1).and_then(|s| s.parse::<i32>().ok()).unwrap_or(-1);
            if pid == 2 || ppid == 2 {
                out.push(KernelThread { tid: pid, name });
            }
        }
        out.sort_by_key(|t| t.tid);
        Ok(out)
    }
}

/// What the current process is allowed to do. Gathering it changes nothing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub euid: u32,
    pub cap_sys_nice: bool,
    pub cap_ipc_lock: bool,
    /// `RLIMIT_RTPRIO` soft limit.
    pub rtprio_limit: u64,
    /// `RLIMIT_MEMLOCK` soft limit in bytes; `None` when unlimited.
    pub memlock_limit: Option<u64>,
    pub preempt_rt: bool,
    pub can_fifo: bool,
    pub can_lock_memory: bool,
    pub can_tune_kernel_threads: bool,
}

impl fmt::Display for Capabilities {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let yn = |b: bool| if b { "yes" } else { "no" };
        writeln!(f, "euid:                 {}", self.euid)?;
        writeln!(f, "PREEMPT-RT kernel:    {}", yn(self.preempt_rt))?;
        writeln!(f, "SCHED_FIFO:           {}", yn(self.can_fifo))?;
        writeln!(f, "RLIMIT_RTPRIO:        {}", self.rtprio_limit)?;
        writeln!(f, "memory lock:          {}", yn(self.can_lock_memory))?;
        match self.memlock_limit {
            Some(b) => writeln!(f, "RLIMIT_MEMLOCK:       {b} bytes")?,
            None => writeln!(f, "RLIMIT_MEMLOCK:       unlimited")?,
        }
        write!(f, "kernel thread tuning: {}", yn(self.can_tune_kernel_threads))
    }
}

fn rlimit(resource: libc::__rlimit_resource_t) -> Option<u64> {
    let mut lim = libc::rlimit { rlim_cur: 0, rlim_max: 0 };
    // SAFETY: lim is a valid out-pointer.
    if unsafe { libc::getrlimit(resource, &mut lim) } != 0 {
        return Some(0);
    }
    if lim.rlim_cur == libc::RLIM_INFINITY {
        None
    } else {
        Some(lim.rlim_cur)
    }
}

pub fn probe() -> Capabilities {
    probe_at(Path::new("/proc"), Path::new("/sys/kernel/realtime"))
}

fn probe_at(proc_root: &Path, realtime_flag: &Path) -> Capabilities {
    // SAFETY: geteuid has no preconditions.
    let euid = unsafe { libc::geteuid() };
    let cap_eff = status_field(&proc_root.join("self/status"), "CapEff:")
        .ok()
        .flatten()
        .and_then(|h| u64::from_str_radix(&h, 16).ok())
        .unwrap_or(0);
    let cap_ipc_lock = cap_eff & (1 << 14) != 0;
    let cap_sys_nice = cap_eff & (1 << 23) != 0;
    let rtprio_limit = rlimit(libc::RLIMIT_RTPRIO).unwrap_or(u64::MAX);
    let memlock_limit = rlimit(libc::RLIMIT_MEMLOCK);
    let preempt_rt = fs::read_to_string(realtime_flag).map(|s| s.trim() == "1").unwrap_or(false);
    let kthreads_visible =
        SystemBackend::with_proc_root(proc_root).kernel_threads().map(|t| !t.is_empty()).unwrap_or(false);
    Capabilities {
        euid,
        cap_sys_nice,
        cap_ipc_lock,
        rtprio_limit,
        memlock_limit,
        preempt_rt,
        can_fifo: cap_sys_nice || rtprio_limit > 0,
        can_lock_memory: cap_ipc_lock || memlock_limit.is_none(),
        can_tune_kernel_threads: cap_sys_nice && kthreads_visible,
    }
}

fn outcome_for(err: &io::Error) -> Outcome {
    match err.raw_os_error() {
        Some(libc::EPERM) | Some(libc::EACCES) | Some(libc::EAGAIN) | Some(libc::ENOMEM) => Outcome::Denied,
        _ => Outcome::Unsupported,
    }
}

/// Applies `sched` to the calling thread and reads it back.
pub fn apply_current_thread(sched: ThreadSched) -> (Outcome, ThreadSched) {
    let before = thread_sched(0).unwrap_or(ThreadSched::NORMAL);
    let outcome = match set_thread_sched(0, sched) {
        Ok(()) => Outcome::Applied,
        Err(e) => outcome_for(&e),
    };
    let effective = thread_sched(0).unwrap_or(before);
    let outcome = if outcome == Outcome::Applied && effective != sched { Outcome::Denied } else { outcome };
    (outcome, effective)
}

/// Pins the calling thread to one CPU.
pub fn pin_current_thread(cpu: usize) -> io::Result<()> {
    // SAFETY: the cpu_set_t is zero-initialised and only touched through libc macros.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut set);
        check(libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set))
    }
}

/// Whether strict mode turns a non-applied setting into an abort.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Strict,
    BestEffort,
}

/// Process-wide RT state applied by [`apply`]. Restoring puts every changed
/// setting back the way it was.
pub struct RtSession {
    report: AppliedReport,
    backend: Arc<dyn SchedBackend>,
    memory_locked: bool,
    kernel_restore: Vec<(i32, ThreadSched)>,
    restored: bool,
}

impl fmt::Debug for RtSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RtSession")
            .field("report", &self.report)
            .field("memory_locked", &self.memory_locked)
            .field("kernel_restore", &self.kernel_restore)
            .finish()
    }
}

impl RtSession {
    pub fn report(&self) -> &AppliedReport {
        &self.report
    }

    pub fn restore(mut self) {
        self.restore_inner();
    }

    fn restore_inner(&mut self) {
        if self.restored {
            return;
        }
        self.restored = true;
        for (tid, prev) in self.kernel_restore.drain(..).rev() {
            if let Err(e) = self.backend.set_sched(tid, prev) {
                log::warn!("restoring scheduling of tid {tid}: {e}");
            }
        }
        if self.memory_locked {
            if let Err(e) = self.backend.unlock_memory() {
                log::warn!("munlockall: {e}");
            }
        }
    }
}

impl Drop for RtSession {
    fn drop(&mut self) {
        self.restore_inner();
    }
}

/// Tries `sched` on a short-lived helper thread so the caller's own
/// scheduling is never disturbed.
fn trial_thread_sched(backend: &Arc<dyn SchedBackend>, sched: ThreadSched) -> (Outcome, String) {
    let backend = Arc::clone(backend);
    let res = std::thread::Builder::new()
        .name("rtt-rt-probe".into())
        .spawn(move || {
            let outcome = match backend.set_sched(0, sched) {
                Ok(()) => Outcome::Applied,
                Err(e) => outcome_for(&e),
            };
            let effective = backend.get_sched(0);
            (outcome, effective)
        })
        .map(|h| h.join());
    match res {
        Ok(Ok((outcome, Ok(effective)))) => {
            let outcome = if outcome == Outcome::Applied && effective != sched { Outcome::Denied } else { outcome };
            (outcome, effective.to_string())
        }
        Ok(Ok((outcome, Err(e)))) => (outcome, format!("unreadable: {e}")),
        _ => (Outcome::Unsupported, "helper thread failed".into()),
    }
}

/// Sets every kernel thread whose name matches `pattern` to FIFO `prio`.
/// All-or-nothing: on the first failure the threads already changed are
/// put back.
fn tune_kernel_threads(
    backend: &dyn SchedBackend,
    pattern: &Regex,
    prio: u8,
    restore: &mut Vec<(i32, ThreadSched)>,
) -> (Outcome, String) {
    let threads = match backend.kernel_threads() {
        Ok(t) => t,
        Err(e) => return (Outcome::Unsupported, format!("thread listing unavailable: {e}")),
    };
    let matching: Vec<&KernelThread> = threads.iter().filter(|t| pattern.is_match(&t.name)).collect();
    if matching.is_empty() {
        return (Outcome::Unsupported, format!("no kernel thread matches /{pattern}/"));
    }
    let target = ThreadSched::fifo(prio);
    let mut changed: Vec<(i32, ThreadSched)> = Vec::new();
    for t in &matching {
        let prev = match backend.get_sched(t.tid) {
            Ok(p) => p,
            Err(e) => {
                rollback(backend, &mut changed);
                return (outcome_for(&e), format!("{}: {e}", t.name));
            }
        };
        if let Err(e) = backend.set_sched(t.tid, target) {
            rollback(backend, &mut changed);
            return (outcome_for(&e), format!("{}: {e}", t.name));
        }
        changed.push((t.tid, prev));
    }
    let mut effective: Vec<String> = Vec::with_capacity(matching.len());
    let mut all_ok = true;
    for t in &matching {
        match backend.get_sched(t.tid) {
            Ok(s) => {
                all_ok &= s == target;
                effective.push(format!("{}={s}", t.name));
            }
            Err(_) => {
                all_ok = false;
                effective.push(format!("{}=?", t.name));
            }
        }
    }
    if !all_ok {
        rollback(backend, &mut changed);
        return (Outcome::Denied, effective.join(","));
    }
    restore.extend(changed);
    (Outcome::Applied, effective.join(","))
}

fn rollback(backend: &dyn SchedBackend, changed: &mut Vec<(i32, ThreadSched)>) {
    for (tid, prev) in changed.drain(..).rev() {
        let _ = backend.set_sched(tid, prev);
    }
}

/// Applies the process-wide parts of `profile` and verifies the per-thread
/// parts on a helper thread. Benchmark threads apply their own scheduling
/// at startup with [`apply_current_thread`].
pub fn apply(profile: &RtProfile, mode: Mode, backend: Arc<dyn SchedBackend>) -> Result<RtSession, RtError> {
    profile.validate()?;
    let eth_re = Regex::new(&profile.eth_irq_pattern).expect("validated");
    let soft_re = Regex::new(&profile.softirq_pattern).expect("validated");

    let mut session = RtSession {
        report: AppliedReport::default(),
        backend: Arc::clone(&backend),
        memory_locked: false,
        kernel_restore: Vec::new(),
        restored: false,
    };

    let cycle = profile.cycle_sched();
    let (o, eff) = trial_thread_sched(&backend, cycle);
    session.report.push(Setting::CyclePolicy, o, cycle.to_string(), eff);
    let transport = profile.transport_sched();
    let (o, eff) = trial_thread_sched(&backend, transport);
    session.report.push(Setting::TransportPolicy, o, transport.to_string(), eff);

    if profile.lock_memory {
        let outcome = match backend.lock_memory() {
            Ok(()) => Outcome::Applied,
            Err(e) => outcome_for(&e),
        };
        session.memory_locked = outcome == Outcome::Applied;
        let kib = backend.locked_kib().unwrap_or(0);
        let outcome = if outcome == Outcome::Applied && kib == 0 { Outcome::Denied } else { outcome };
        session.report.push(Setting::MemoryLock, outcome, "MCL_CURRENT|MCL_FUTURE".into(), format!("VmLck {kib} kB"));
    }
    if let Some(prio) = profile.eth_irq_prio {
        let (o, eff) = tune_kernel_threads(&*backend, &eth_re, prio, &mut session.kernel_restore);
        session.report.push(Setting::EthIrqThreads, o, format!("FIFO/{prio}"), eff);
    }
    if let Some(prio) = profile.softirq_prio {
        let (o, eff) = tune_kernel_threads(&*backend, &soft_re, prio, &mut session.kernel_restore);
        session.report.push(Setting::SoftirqThreads, o, format!("FIFO/{prio}"), eff);
    }

    if mode == Mode::Strict {
        if let Some(bad) = session.report.settings.iter().find(|s| s.outcome != Outcome::Applied) {
            let (setting, outcome) = (bad.setting, bad.outcome);
            let report = session.report.clone();
            session.restore_inner();
            return Err(RtError::StrictDenied { setting, outcome, report });
        }
    }
    Ok(session)
}


#[cfg(test)]
mod tests {
    use super::fake::FakeBackend;
    use super::*;

    #[test]
    fn ladder_matches_enumeration_oracle() {
        let values = [10u8, 20, 30, 40];
        let mut passed = 0;
        for &e in &values {
            for &c in &values {
                for &t in &values {
                    for &s in &values {
                        let oracle = e > c && c >= t && t > s;
                        assert_eq!(ladder_holds(Some(e), c, t, Some(s)), oracle, "{e} {c} {t} {s}");
                        let p = RtProfile {
                            eth_irq_prio: Some(e),
                            cycle_prio: c,
                            transport_prio: t,
                            softirq_prio: Some(s),
                            ..RtProfile::default()
                        };
                        assert_eq!(p.validate().is_ok(), oracle);
                        passed += oracle as usize;
                    }
                }
            }
        }
        // e > c >= t > s over 4 values: choose 3 distinct (c == t) or 4 distinct.
        assert_eq!(passed, 4 + 1);
    }

    #[test]
    fn kernel_tuned_ladder_is_valid() {
        let p = RtProfile::kernel_tuned();
        assert_eq!((p.eth_irq_prio, p.cycle_prio, p.transport_prio, p.softirq_prio), (Some(90), 80, 80, Some(60)));
        p.validate().unwrap();
    }

    #[test]
    fn fifo_priority_zero_rejected() {
        let p = RtProfile { cycle_prio: 0, transport_prio: 0, ..RtProfile::default() };
        assert!(matches!(p.validate(), Err(RtError::InvalidProfile(_))));
        let p = RtProfile { policy: Policy::Other, cycle_prio: 0, transport_prio: 0, ..RtProfile::default() };
        p.validate().unwrap();
    }

    #[test]
    fn ladder_violation_rejected_before_any_system_call() {
        let backend = Arc::new(FakeBackend::with_threads(&[(100, "ksoftirqd/0")]));
        let p = RtProfile { softirq_prio: Some(85), ..RtProfile::kernel_tuned() };
        let err = apply(&p, Mode::BestEffort, backend.clone()).unwrap_err();
        assert!(matches!(err, RtError::InvalidProfile(_)));
        assert_eq!(backend.sched_of(100), ThreadSched::NORMAL);
        assert!(!*backend.locked.lock().unwrap());
    }

    #[test]
    fn privileged_profile_applies_everything_and_restores() {
        let backend = Arc::new(FakeBackend::with_threads(&[
            (10, "irq/42-eth0"),
            (11, "ksoftirqd/0"),
            (12, "ksoftirqd/1"),
            (13, "kworker/0:1"),
        ]));
        let p = RtProfile::kernel_tuned();
        let session = apply(&p, Mode::Strict, backend.clone()).unwrap();
        let r = session.report();
        assert_eq!(r.settings.len(), 5);
        for s in &r.settings {
            assert_eq!(s.outcome, Outcome::Applied, "{s:?}");
        }
        assert!(r.rt_verified());
        assert_eq!(backend.sched_of(10), ThreadSched::fifo(90));
        assert_eq!(backend.sched_of(11), ThreadSched::fifo(60));
        assert_eq!(backend.sched_of(12), ThreadSched::fifo(60));
        assert_eq!(backend.sched_of(13), ThreadSched::NORMAL);
        session.restore();
        assert_eq!(backend.sched_of(10), ThreadSched::NORMAL);
        assert_eq!(backend.sched_of(11), ThreadSched::NORMAL);
        assert!(!*backend.locked.lock().unwrap());
    }

    #[test]
    fn denied_kernel_thread_rolls_back_its_siblings() {
        let mut fake = FakeBackend::with_threads(&[(11, "ksoftirqd/0"), (12, "ksoftirqd/1")]);
        fake.deny = vec![12];
        let backend = Arc::new(fake);
        let p = RtProfile { policy: Policy::Other, lock_memory: false, softirq_prio: Some(60), ..RtProfile::default() };
        let session = apply(&p, Mode::BestEffort, backend.clone()).unwrap();
        assert_eq!(session.report().outcome(Setting::SoftirqThreads), Some(Outcome::Denied));
        assert_eq!(backend.sched_of(11), ThreadSched::NORMAL);
        assert_eq!(backend.sched_of(12), ThreadSched::NORMAL);
    }

    #[test]
    fn unmatched_pattern_is_unsupported_and_strict_aborts() {
        let backend = Arc::new(FakeBackend::with_threads(&[(11, "kworker/0:1")]));
        let p = RtProfile { policy: Policy::Other, ..RtProfile::kernel_tuned() };
        let session = apply(&p, Mode::BestEffort, backend.clone()).unwrap();
        assert_eq!(session.report().outcome(Setting::EthIrqThreads), Some(Outcome::Unsupported));
        drop(session);
        assert!(!*backend.locked.lock().unwrap());

        let err = apply(&p, Mode::Strict, backend.clone()).unwrap_err();
        match err {
            RtError::StrictDenied { outcome, .. } => assert_eq!(outcome, Outcome::Unsupported),
            e => panic!("unexpected {e}"),
        }
        assert!(!*backend.locked.lock().unwrap(), "strict abort must undo the memory lock");
    }

    #[test]
    fn unprivileged_fifo_is_denied_in_best_effort() {
        let fake = FakeBackend { deny_self: true, deny_mlock: true, ..Default::default() };
        let backend = Arc::new(fake);
        let p = RtProfile::default();
        let session = apply(&p, Mode::BestEffort, backend.clone()).unwrap();
        let r = session.report();
        assert_eq!(r.outcome(Setting::CyclePolicy), Some(Outcome::Denied));
        assert_eq!(r.outcome(Setting::MemoryLock), Some(Outcome::Denied));
        assert!(!r.rt_verified());
        assert!(apply(&p, Mode::Strict, backend).is_err());
    }

    #[test]
    fn every_requested_setting_has_one_outcome() {
        let backend = Arc::new(FakeBackend::with_threads(&[(10, "irq/9-eth0"), (11, "ksoftirqd/0")]));
        let p = RtProfile { policy: Policy::Other, ..RtProfile::kernel_tuned() };
        let session = apply(&p, Mode::BestEffort, backend).unwrap();
        let mut kinds: Vec<Setting> = session.report().settings.iter().map(|s| s.setting).collect();
        kinds.dedup();
        assert_eq!(kinds.len(), 5);
    }

    #[test]
    fn probe_is_side_effect_free_and_repeatable() {
        let a = probe();
        let b = probe();
        assert_eq!(a, b);
    }

    #[test]
    fn kernel_thread_listing_parses_fake_proc() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |pid: &str, stat: &str| {
            let p = dir.path().join(pid);
            fs::create_dir_all(&p).unwrap();
            fs::write(p.join("stat"), stat).unwrap();
        };
        mk("2", "2 (kthreadd) S 0 0 0");
        mk("15", "15 (ksoftirqd/0) S 2 0 0");
        mk("77", "77 (irq/24-eth0 rx) S 2 0 0");
        mk("900", "900 (bash) S 1 900 900");
        fs::create_dir_all(dir.path().join("self")).unwrap();
        let backend = SystemBackend::with_proc_root(dir.path());
        let names: Vec<String> = backend.kernel_threads().unwrap().into_iter().map(|t| t.name).collect();
        assert_eq!(names, vec!["kthreadd", "ksoftirqd/0", "irq/24-eth0 rx"]);
    }

    #[test]
    fn real_thread_read_back() {
        let handle = std::thread::spawn(|| {
            let (o, eff) = apply_current_thread(ThreadSched::NORMAL);
            (o, eff)
        });
        let (o, eff) = handle.join().unwrap();
        assert_eq!(o, Outcome::Applied);
        assert_eq!(eff, ThreadSched::NORMAL);
    }
}
