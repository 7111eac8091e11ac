//! Scoped-thread execution. Every helper returns results in input order, so
//! output never depends on the thread count.

use std::num::NonZeroUsize;

use pdt_core::analytics::{simulate_trials, summarize, ClusterSimConfig, ClusterSimResult, TrialTallies};
use pdt_core::decode::{run_stride, StrideContext, StrideExecutor, StrideOutput, StrideTask};

/// Map `f` over `items` on up to `threads` scoped threads.
pub fn par_map<T, R, F>(items: Vec<T>, threads: NonZeroUsize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let n = items.len();
    let threads = threads.get().min(n.max(1));
    if threads == 1 {
        return items.into_iter().map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let mut chunks: Vec<Vec<T>> = Vec::with_capacity(threads);
    let mut it = items.into_iter();
    loop {
        let c: Vec<T> = it.by_ref().take(chunk).collect();
        if c.is_empty() {
            break;
        }
        chunks.push(c);
    }
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|c| s.spawn(move || c.into_iter().map(f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// Runs the strides of a round on separate threads.
#[derive(Debug, Clone, Copy)]
pub struct ThreadedExecutor {
    pub threads: NonZeroUsize,
}

impl ThreadedExecutor {
    pub fn new(threads: usize) -> Self {
        Self {
            threads: NonZeroUsize::new(threads).unwrap_or(NonZeroUsize::MIN),
        }
    }
}

impl StrideExecutor for ThreadedExecutor {
    fn execute(&self, ctx: &StrideContext<'_>, tasks: Vec<StrideTask>) -> pdt_core::Result<Vec<StrideOutput>> {
        par_map(tasks, self.threads, |t| run_stride(ctx, t))
            .into_iter()
            .collect()
    }
}

/// Clustered-rollback Monte Carlo split into contiguous trial blocks.
pub fn simulate_clustered_threaded(cfg: &ClusterSimConfig, threads: usize) -> pdt_core::Result<ClusterSimResult> {
    cfg.validate()?;
    let threads = threads.clamp(1, cfg.trials);
    let per = cfg.trials.div_ceil(threads);
    let ranges: Vec<_> = (0..threads)
        .map(|i| (i * per).min(cfg.trials)..((i + 1) * per).min(cfg.trials))
        .collect();
    let parts = par_map(ranges, NonZeroUsize::new(threads).unwrap(), |r| simulate_trials(cfg, r));
    let mut total = TrialTallies::default();
    for p in &parts {
        total.merge(p);
    }
    Ok(summarize(cfg, &total))
}
