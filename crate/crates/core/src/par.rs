//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature, [`map`] fans work out over a rayon pool of the
//! requested size; without it (or with `workers <= 1`) it runs in order on the
//! calling thread. Callers make every item's result depend only on the item
//! itself, so both paths return identical values.

pub fn map_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_par<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let run = || items.par_iter().map(&f).collect();
    if workers == 0 {
        return run();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    }
}

/// Order-preserving map over `items` with up to `workers` threads.
pub fn map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 1 {
        return map_par(items, workers, f);
    }
    let _ = workers;
    map_seq(items, f)
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<u64> = (0..200).collect();
        let seq = map(&items, 1, |x| x * x);
        let par = map(&items, 4, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(seq[17], 289);
    }
}
