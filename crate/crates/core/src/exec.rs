//! Execution strategy for data-parallel kernels.
//!
//! Every hot loop in the crate is written as a set of independent tasks that
//! each own a disjoint slice of the output. The task bodies are identical in
//! both modes; only the driver changes, so results are bitwise identical
//! regardless of strategy or thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Rayon work-stealing over the global pool. Falls back to sequential
    /// when the `parallel` feature is disabled.
    Parallel,
}

impl Default for Exec {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        Exec::Parallel
    }
    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        Exec::Sequential
    }
}

/// Split `data` into `chunk`-sized pieces and run `f(index, piece)` on each.
pub fn for_each_chunk<T, F>(exec: Exec, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk > 0);
    match exec {
        Exec::Sequential => {
            for (i, c) in data.chunks_mut(chunk).enumerate() {
                f(i, c);
            }
        }
        Exec::Parallel => {
            #[cfg(feature = "parallel")]
            {
                data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            }
            #[cfg(not(feature = "parallel"))]
            {
                for (i, c) in data.chunks_mut(chunk).enumerate() {
                    f(i, c);
                }
            }
        }
    }
}

/// Run `f(i)` for every `i` in `0..n` where each call only touches private state.
pub fn for_each_index<F>(exec: Exec, n: usize, f: F)
where
    F: Fn(usize) + Sync + Send,
{
    match exec {
        Exec::Sequential => {
            for i in 0..n {
                f(i);
            }
        }
        Exec::Parallel => {
            #[cfg(feature = "parallel")]
            {
                (0..n).into_par_iter().for_each(f);
            }
            #[cfg(not(feature = "parallel"))]
            {
                for i in 0..n {
                    f(i);
                }
            }
        }
    }
}

/// Map `0..n` to a vector, preserving index order.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        Exec::Parallel => {
            #[cfg(feature = "parallel")]
            {
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_drivers_agree() {
        let mut a = vec![0u32; 64];
        let mut b = vec![0u32; 64];
        for_each_chunk(Exec::Sequential, &mut a, 8, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 100 + j) as u32;
            }
        });
        for_each_chunk(Exec::Parallel, &mut b, 8, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 100 + j) as u32;
            }
        });
        assert_eq!(a, b);
    }

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(Exec::Parallel, 100, |i| i * i);
        assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }
}
