//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work items are spread over the current
//! rayon pool; without it they run in order on the calling thread. Results are
//! always returned in item order and every caller reduces them in that order,
//! so outputs are bit-identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `f(0), f(1), .., f(n - 1)`, collected in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// `f` applied to every item, collected in item order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Runs `f` with at most `threads` workers; `Some(0)` and `Some(1)` both mean
/// serial execution and `None` keeps the default pool.
pub fn with_threads<R, F>(threads: Option<usize>, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        match threads {
            None => f(),
            Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
                Ok(pool) => pool.install(f),
                Err(_) => f(),
            },
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

/// Worker count of the pool the caller is running in (1 without the `parallel` feature).
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_any_pool_size() {
        let serial = with_threads(Some(0), || map_indexed(100, |i| i * i));
        let pooled = with_threads(Some(4), || map_indexed(100, |i| i * i));
        assert_eq!(serial, pooled);
        assert_eq!(serial[7], 49);
        let items: Vec<u32> = (0..10).collect();
        assert_eq!(map(&items, |x| x + 1), (1..11).collect::<Vec<_>>());
    }
}
