//! Scenario-level fan-out. Results always come back in index order, so every
//! reduction over scenarios sums in the same order whatever the thread count.

use rayon::prelude::*;

pub struct Workers {
    pool: Option<rayon::ThreadPool>,
}

impl Workers {
    /// `threads == 0` uses the rayon default, `1` runs inline.
    pub fn new(threads: usize) -> Self {
        if threads == 1 {
            return Workers { pool: None };
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().ok();
        Workers { pool }
    }

    pub fn sequential() -> Self {
        Workers { pool: None }
    }

    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match &self.pool {
            None => (0..n).map(f).collect(),
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }

    /// Like [`Workers::map`] but stops at the first error in index order.
    pub fn try_map<T, E, F>(&self, n: usize, f: F) -> Result<Vec<T>, E>
    where
        T: Send,
        E: Send,
        F: Fn(usize) -> Result<T, E> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }
}
