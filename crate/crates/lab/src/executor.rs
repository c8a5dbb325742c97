use nextpoint_core::exec::Executor;
use rayon::prelude::*;

/// Thread-pool executor. `collect` on an indexed parallel iterator keeps
/// input order, so reductions over the output match the sequential run.
pub struct RayonExecutor {
    pool: rayon::ThreadPool,
}

impl RayonExecutor {
    /// `threads == 0` uses the number of available cores.
    pub fn new(threads: usize) -> Result<Self, rayon::ThreadPoolBuildError> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
        Ok(Self { pool })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for RayonExecutor {
    fn map_indexed<T: Send>(&self, n: usize, f: &(dyn Fn(usize) -> T + Sync)) -> Vec<T> {
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nextpoint_core::exec::Sequential;

    #[test]
    fn matches_sequential_order() {
        let ex = RayonExecutor::new(3).unwrap();
        let f = |i: usize| (i * 7919) % 101;
        assert_eq!(ex.map_indexed(1000, &f), Sequential.map_indexed(1000, &f));
    }
}
