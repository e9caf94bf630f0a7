use rayon::ThreadPool;

/// Runs `f` inside a pool capped by `SKIM_THREADS` (0 or unset = rayon default).
pub(crate) fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match thread_cap().and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => install(&pool, f),
        None => f(),
    }
}

fn install<T: Send>(pool: &ThreadPool, f: impl FnOnce() -> T + Send) -> T {
    pool.install(f)
}

fn thread_cap() -> Option<usize> {
    let n: usize = std::env::var("SKIM_THREADS").ok()?.trim().parse().ok()?;
    (n > 0).then_some(n)
}
