//! Per-worker fan-out. With the `parallel` feature the logical workers run on
//! the rayon pool; without it (or with [`ExecMode::Sequential`]) they run in
//! rank order on the calling thread. Results are collected by rank either way.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

impl ExecMode {
    /// The mode actually used: `Parallel` degrades to `Sequential` when the
    /// crate is built without rayon.
    pub fn effective(self) -> Self {
        if cfg!(feature = "parallel") {
            self
        } else {
            ExecMode::Sequential
        }
    }
}

pub fn map_ranks<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode.effective() {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

pub fn try_map_ranks<T, E, F>(mode: ExecMode, n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_ranks(mode, n, f).into_iter().collect()
}

pub fn try_for_each_mut<T, E, F>(mode: ExecMode, items: &mut [T], f: F) -> Result<(), E>
where
    T: Send,
    E: Send,
    F: Fn(usize, &mut T) -> Result<(), E> + Sync + Send,
{
    match mode.effective() {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            let results: Vec<Result<(), E>> = items
                .par_iter_mut()
                .enumerate()
                .map(|(i, t)| f(i, t))
                .collect();
            results.into_iter().collect()
        }
        _ => {
            for (i, t) in items.iter_mut().enumerate() {
                f(i, t)?;
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_collect_in_rank_order() {
        for mode in [ExecMode::Sequential, ExecMode::Parallel] {
            assert_eq!(map_ranks(mode, 5, |r| r * r), vec![0, 1, 4, 9, 16]);
            let mut v = vec![0usize; 4];
            try_for_each_mut::<_, (), _>(mode, &mut v, |i, x| {
                *x = i + 1;
                Ok(())
            })
            .unwrap();
            assert_eq!(v, vec![1, 2, 3, 4]);
        }
    }

    #[test]
    fn errors_surface() {
        let r: Result<Vec<usize>, String> = try_map_ranks(ExecMode::Parallel, 3, |i| {
            if i == 1 {
                Err("boom".to_string())
            } else {
                Ok(i)
            }
        });
        assert_eq!(r.unwrap_err(), "boom");
    }
}
