//! Execution strategy for the data-parallel loops (per-node scoring, per-day
//! generation, per-threshold sweeps). With the `parallel` feature disabled only
//! the sequential path exists. Both paths produce identical output: every
//! parallel loop is an indexed map whose results are collected in input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

impl Exec {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
        }
    }

    pub fn map_range<R, F>(self, range: std::ops::Range<u32>, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(u32) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => range.map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => range.into_par_iter().map(f).collect(),
        }
    }
}
