//! Profiler configuration, trigger backends and sampling state.
//!
//! The sampler inspects only the topmost frame. With the deterministic
//! `VirtualCounter` backend a trigger fires at every crossing of a
//! multiple of the sampling period in executed instruction units.
//! Interrupt backends (OS timer, PMU) only set a pending flag from
//! their handler; the VM consumes it at the next bytecode boundary,
//! where frames are in a consistent state.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

/// How the profiler integrates with program execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfilerMode {
    /// No profiler structures are touched on the hot path.
    Off,
    /// Samples are recorded but never acted on.
    RecordOnly,
    /// Samples drive recompilation.
    Full,
}

/// Source of asynchronous trigger interruptions.
pub trait InterruptSource {
    /// Consumes a pending interruption, if any.
    fn poll(&self) -> bool;
    fn shutdown(&mut self) {}
    fn describe(&self) -> &'static str {
        "interrupt"
    }
}

pub enum TriggerBackend {
    /// Deterministic: fires every `sample_period` executed units.
    VirtualCounter,
    Interrupt(Box<dyn InterruptSource>),
}

impl std::fmt::Debug for TriggerBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TriggerBackend::VirtualCounter => write!(f, "VirtualCounter"),
            TriggerBackend::Interrupt(s) => write!(f, "Interrupt({})", s.describe()),
        }
    }
}

/// Tuning knobs. Defaults follow the recommended configuration: a
/// sampling period of 500k units with a confidence threshold of 20
/// samples, clearing every 100 triggers, recompiling when more than
/// half of the mapped slots disagree with the compiled feedback.
#[derive(Debug)]
pub struct ProfilerConfig {
    pub sample_period: u64,
    pub threshold: u64,
    pub clear_interval: u64,
    /// Stale fraction as an exact rational (numerator, denominator).
    pub stale_fraction: (u64, u64),
    pub backend: TriggerBackend,
}

impl Default for ProfilerConfig {
    fn default() -> Self {
        ProfilerConfig {
            sample_period: 500_000,
            threshold: 20,
            clear_interval: 100,
            stale_fraction: (1, 2),
            backend: TriggerBackend::VirtualCounter,
        }
    }
}

impl ProfilerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.sample_period < 1 {
            return Err("sample period must be >= 1".into());
        }
        if self.threshold < 1 {
            return Err("threshold must be >= 1".into());
        }
        if self.clear_interval < 1 {
            return Err("clear interval must be >= 1".into());
        }
        let (num, den) = self.stale_fraction;
        if den == 0 || num == 0 || num > den {
            return Err("stale fraction must be in (0, 1]".into());
        }
        Ok(())
    }
}

/// Outcome of one trigger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleOutcome {
    Hit,
    MissNotOptimized,
    MissNoFrame,
}

/// Mutable profiler bookkeeping.
#[derive(Debug, Default)]
pub struct ProfilerState {
    /// Total triggers fired (drives periodic clearing).
    pub trigger_count: u64,
    /// Completed clearing windows.
    pub window: u64,
    /// Number of times any profiler data structure was touched; stays
    /// zero when the profiler is off.
    pub touches: u64,
    pub hits: u64,
    pub miss_not_optimized: u64,
    pub miss_no_frame: u64,
}

/// Interval-timer interrupt source.
///
/// Provided for completeness but unsafe when the embedded program
/// performs blocking system calls: the timer signal aborts or restarts
/// them, which is exactly the failure mode the PMU backend avoids. The
/// virtual counter is the default backend.
#[cfg(unix)]
pub mod os_timer {
    use super::InterruptSource;
    use std::sync::atomic::{AtomicBool, Ordering};

    static TIMER_PENDING: AtomicBool = AtomicBool::new(false);

    extern "C" fn on_alarm(_sig: libc::c_int) {
        TIMER_PENDING.store(true, Ordering::Relaxed);
    }

    pub struct OsTimer {
        active: bool,
    }

    impl OsTimer {
        /// Arms a repeating profiling interval timer. The period is in
        /// microseconds of wall time; instruction-unit periods do not
        /// map onto timers.
        pub fn start(period_micros: u64) -> std::io::Result<OsTimer> {
            unsafe {
                let mut sa: libc::sigaction = std::mem::zeroed();
                sa.sa_sigaction = on_alarm as usize;
                sa.sa_flags = 0;
                if libc::sigaction(libc::SIGALRM, &sa, std::ptr::null_mut()) != 0 {
                    return Err(std::io::Error::last_os_error());
                }
                let interval = libc::timeval {
                    tv_sec: (period_micros / 1_000_000) as _,
                    tv_usec: (period_micros % 1_000_000) as _,
                };
                let timer = libc::itimerval { it_interval: interval, it_value: interval };
                if libc::setitimer(libc::ITIMER_REAL, &timer, std::ptr::null_mut()) != 0 {
                    return Err(std::io::Error::last_os_error());
                }
            }
            Ok(OsTimer { active: true })
        }

        fn disarm(&mut self) {
            if !self.active {
                return;
            }
            self.active = false;
            unsafe {
                let zero = libc::timeval { tv_sec: 0, tv_usec: 0 };
                let timer = libc::itimerval { it_interval: zero, it_value: zero };
                libc::setitimer(libc::ITIMER_REAL, &timer, std::ptr::null_mut());
            }
            TIMER_PENDING.store(false, Ordering::Relaxed);
        }
    }

    impl InterruptSource for OsTimer {
        fn poll(&self) -> bool {
            TIMER_PENDING.swap(false, Ordering::Relaxed)
        }

        fn shutdown(&mut self) {
            self.disarm();
        }

        fn describe(&self) -> &'static str {
            "os-timer"
        }
    }

    impl Drop for OsTimer {
        fn drop(&mut self) {
            self.disarm();
        }
    }
}

/// Test-friendly interrupt source driven by a shared flag.
pub struct ManualInterrupt(pub Arc<AtomicBool>);

impl InterruptSource for ManualInterrupt {
    fn poll(&self) -> bool {
        self.0.swap(false, Ordering::Relaxed)
    }

    fn describe(&self) -> &'static str {
        "manual"
    }
}
