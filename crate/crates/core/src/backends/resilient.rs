use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use super::{
    BackendError, BackendPolicy, ChatBackend, ChatRequest, ChatResponse, EvidenceDoc, SearchBackend,
};

/// Upper bound on a single backoff delay.
const MAX_BACKOFF: Duration = Duration::from_secs(60);

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

fn thread_sleeper() -> Sleeper {
    Arc::new(std::thread::sleep)
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    semaphore: &'a Semaphore,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore {
            available: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *available == 0 {
            available = self
                .freed
                .wait(available)
                .unwrap_or_else(|e| e.into_inner());
        }
        *available -= 1;
        Permit { semaphore: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut available = self
            .semaphore
            .available
            .lock()
            .unwrap_or_else(|e| e.into_inner());
        *available += 1;
        self.semaphore.freed.notify_one();
    }
}

/// Delay before retry number `retry` (0-based): `base · 2^retry`, capped.
pub fn backoff_delay(policy: &BackendPolicy, retry: u32) -> Duration {
    let factor = 1u64.checked_shl(retry).unwrap_or(u64::MAX);
    Duration::from_millis(policy.backoff_base_ms.saturating_mul(factor)).min(MAX_BACKOFF)
}

/// Runs `attempt` up to `1 + policy.retries` times, sleeping with exponential
/// backoff between retryable failures. Non-retryable errors (4xx, auth,
/// protocol) return immediately.
pub fn retry<T>(
    policy: &BackendPolicy,
    sleeper: &Sleeper,
    mut attempt: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut last = None;
    let mut only_timeouts = true;
    let attempts = policy.retries + 1;
    for n in 0..attempts {
        if n > 0 {
            sleeper(backoff_delay(policy, n - 1));
        }
        match attempt() {
            Ok(value) => return Ok(value),
            Err(err) if err.is_retryable() => {
                log::debug!("attempt {} failed: {err}", n + 1);
                only_timeouts &= err == BackendError::TimedOut;
                last = Some(err);
            }
            Err(err) => return Err(err),
        }
    }
    if only_timeouts {
        Err(BackendError::Timeout { attempts })
    } else {
        Err(BackendError::Unavailable {
            attempts,
            reason: last.map(|e| e.to_string()).unwrap_or_default(),
        })
    }
}

/// Sends one chat request under `policy`'s retry rules.
pub fn chat_complete(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
    policy: &BackendPolicy,
) -> Result<ChatResponse, BackendError> {
    request.validate()?;
    policy.validate()?;
    retry(policy, &thread_sleeper(), || backend.complete(request))
}

/// Wraps a backend with retry and a bound on concurrent in-flight attempts.
/// The permit is held for the attempt only, not during backoff.
pub struct Resilient<B> {
    inner: B,
    policy: BackendPolicy,
    limiter: Semaphore,
    sleeper: Sleeper,
}

impl<B> Resilient<B> {
    pub fn new(inner: B, policy: BackendPolicy) -> Self {
        Resilient {
            inner,
            limiter: Semaphore::new(policy.max_concurrency),
            policy,
            sleeper: thread_sleeper(),
        }
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn run<T>(&self, op: impl Fn(&B) -> Result<T, BackendError>) -> Result<T, BackendError> {
        retry(&self.policy, &self.sleeper, || {
            let _permit = self.limiter.acquire();
            op(&self.inner)
        })
    }
}

impl<B: ChatBackend> ChatBackend for Resilient<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        self.run(|b| b.complete(request))
    }
}

impl<B: SearchBackend> SearchBackend for Resilient<B> {
    fn search(&self, query: &str, top_k: usize) -> Result<Vec<EvidenceDoc>, BackendError> {
        self.run(|b| b.search(query, top_k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{MockChat, ScriptStep};
    use std::collections::HashMap;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn recording_sleeper() -> (Sleeper, Arc<Mutex<Vec<Duration>>>) {
        let log = Arc::new(Mutex::new(Vec::new()));
        let sink = log.clone();
        (Arc::new(move |d| sink.lock().unwrap().push(d)), log)
    }

    fn scripted(steps: Vec<ScriptStep>) -> (MockChat, ChatRequest) {
        let request = ChatRequest::deterministic("m", "prompt");
        let mut script = HashMap::new();
        script.insert(crate::backends::prompt_key("prompt"), steps);
        (MockChat::new(script), request)
    }

    #[test]
    fn two_transient_failures_then_success() {
        let (mock, request) = scripted(vec![
            ScriptStep::Fail { fail: 503 },
            ScriptStep::Fail { fail: 502 },
            ScriptStep::Text("done".into()),
        ]);
        let policy = BackendPolicy {
            retries: 3,
            backoff_base_ms: 10,
            ..Default::default()
        };
        let (sleeper, log) = recording_sleeper();
        let client = Resilient::new(mock, policy).with_sleeper(sleeper);
        assert_eq!(client.complete(&request).unwrap().content, "done");
        let delays = log.lock().unwrap().clone();
        assert_eq!(
            delays,
            vec![Duration::from_millis(10), Duration::from_millis(20)]
        );
        assert_eq!(client.inner().calls(), 3);
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let (mock, request) = scripted(vec![ScriptStep::Fail { fail: 401 }]);
        let (sleeper, log) = recording_sleeper();
        let client = Resilient::new(mock, BackendPolicy::default()).with_sleeper(sleeper);
        assert_eq!(
            client.complete(&request),
            Err(BackendError::AuthFailure { status: 401 })
        );
        assert!(log.lock().unwrap().is_empty());
        assert_eq!(client.inner().calls(), 1);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (mock, request) = scripted(vec![ScriptStep::Fail { fail: 429 }]);
        let (sleeper, _) = recording_sleeper();
        let client = Resilient::new(mock, BackendPolicy::default()).with_sleeper(sleeper);
        assert!(matches!(
            client.complete(&request),
            Err(BackendError::Rejected { status: 429, .. })
        ));
        assert_eq!(client.inner().calls(), 1);
    }

    #[test]
    fn exhausted_retries_report_unavailable() {
        let (mock, request) = scripted(vec![ScriptStep::Fail { fail: 500 }]);
        let policy = BackendPolicy {
            retries: 2,
            backoff_base_ms: 1,
            ..Default::default()
        };
        let (sleeper, log) = recording_sleeper();
        let client = Resilient::new(mock, policy).with_sleeper(sleeper);
        assert!(matches!(
            client.complete(&request),
            Err(BackendError::Unavailable { attempts: 3, .. })
        ));
        assert_eq!(log.lock().unwrap().len(), 2);
    }

    #[test]
    fn timeouts_surface_as_timeout() {
        let policy = BackendPolicy {
            retries: 1,
            backoff_base_ms: 1,
            ..Default::default()
        };
        let (sleeper, _) = recording_sleeper();
        let result: Result<(), _> = retry(&policy, &sleeper, || Err(BackendError::TimedOut));
        assert_eq!(result, Err(BackendError::Timeout { attempts: 2 }));
    }

    #[test]
    fn backoff_is_nondecreasing_and_capped() {
        let policy = BackendPolicy {
            backoff_base_ms: 700,
            ..Default::default()
        };
        let delays: Vec<_> = (0..70).map(|i| backoff_delay(&policy, i)).collect();
        assert!(delays.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*delays.last().unwrap(), MAX_BACKOFF);
    }

    struct Instrumented {
        in_flight: AtomicUsize,
        peak: AtomicUsize,
    }

    impl ChatBackend for Instrumented {
        fn complete(&self, _: &ChatRequest) -> Result<ChatResponse, BackendError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(2));
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            Ok(ChatResponse {
                content: String::new(),
                prompt_tokens: 0,
                completion_tokens: 0,
            })
        }
    }

    #[test]
    fn concurrency_limit_holds_under_stress() {
        let policy = BackendPolicy {
            max_concurrency: 3,
            ..Default::default()
        };
        let client = Arc::new(Resilient::new(
            Instrumented {
                in_flight: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
            },
            policy,
        ));
        let request = ChatRequest::deterministic("m", "x");
        std::thread::scope(|scope| {
            for _ in 0..24 {
                let client = client.clone();
                let request = request.clone();
                scope.spawn(move || {
                    for _ in 0..5 {
                        client.complete(&request).unwrap();
                    }
                });
            }
        });
        let peak = client.inner().peak.load(Ordering::SeqCst);
        assert!(peak <= 3, "peak in-flight {peak}");
        assert!(peak >= 2, "stress test never overlapped requests");
    }
}
