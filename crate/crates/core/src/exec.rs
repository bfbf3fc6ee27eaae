//! Sequential or rayon-backed execution of data-parallel loops.
//!
//! Every helper preserves input order in its output, so results do not
//! depend on which strategy ran them.

/// How a data-parallel loop is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Runs on rayon when the `parallel` feature is enabled, else sequentially.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// The strategy that will actually run.
    pub fn effective(self) -> Execution {
        if cfg!(feature = "parallel") {
            self
        } else {
            Execution::Sequential
        }
    }

    pub fn map<T, U, F>(self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        match self.effective() {
            Execution::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            Execution::Parallel => unreachable!(),
        }
    }

    /// Like [`Execution::map`] but never runs more than `max_workers`
    /// closures at once.
    pub fn map_bounded<T, U, F>(self, items: &[T], max_workers: usize, f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        #[cfg(not(feature = "parallel"))]
        let _ = max_workers;
        match self.effective() {
            Execution::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                let max_workers = max_workers.max(1);
                if max_workers == 1 || items.len() <= 1 {
                    return items.iter().map(f).collect();
                }
                match rayon::ThreadPoolBuilder::new().num_threads(max_workers).build() {
                    Ok(pool) => pool.install(|| items.par_iter().map(f).collect()),
                    Err(e) => {
                        tracing::warn!("falling back to sequential execution: {e}");
                        items.iter().map(f).collect()
                    }
                }
            }
            #[cfg(not(feature = "parallel"))]
            Execution::Parallel => unreachable!(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = Execution::Sequential.map(&xs, |x| x * x);
        let par = Execution::Parallel.map(&xs, |x| x * x);
        assert_eq!(seq, par);
        let bounded = Execution::Parallel.map_bounded(&xs, 3, |x| x * x);
        assert_eq!(seq, bounded);
    }

    #[test]
    fn bound_is_respected() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let xs: Vec<u32> = (0..64).collect();
        Execution::Parallel.map_bounded(&xs, 4, |_| {
            let now = live.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(1));
            live.fetch_sub(1, Ordering::SeqCst);
        });
        assert!(peak.load(Ordering::SeqCst) <= 4);
    }
}
