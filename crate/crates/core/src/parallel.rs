//! Seed-level fan-out. Runs are independent, so results are collected in
//! input order whatever the execution order was.

use crate::error::Result;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Parallelism {
    /// The global pool (all cores) when built with `parallel`.
    #[default]
    Auto,
    Sequential,
    /// A dedicated pool with this many threads.
    Workers(usize),
}

impl Parallelism {
    pub fn from_workers(workers: Option<usize>) -> Self {
        match workers {
            None => Parallelism::Auto,
            Some(0 | 1) => Parallelism::Sequential,
            Some(n) => Parallelism::Workers(n),
        }
    }
}

/// `f` applied to every seed. The first error in seed order wins.
pub fn map_seeds<T, F>(seeds: &[u64], par: Parallelism, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    let results = run(seeds, par, &f);
    results.into_iter().collect()
}

#[cfg(feature = "parallel")]
fn run<T, F>(seeds: &[u64], par: Parallelism, f: &F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    match par {
        Parallelism::Sequential => seeds.iter().map(|&s| f(s)).collect(),
        Parallelism::Auto => seeds.par_iter().map(|&s| f(s)).collect(),
        Parallelism::Workers(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| seeds.par_iter().map(|&s| f(s)).collect()),
            Err(_) => seeds.iter().map(|&s| f(s)).collect(),
        },
    }
}

#[cfg(not(feature = "parallel"))]
fn run<T, F>(seeds: &[u64], _par: Parallelism, f: &F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    seeds.iter().map(|&s| f(s)).collect()
}
