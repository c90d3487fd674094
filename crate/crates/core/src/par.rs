//! Order-preserving map used for per-pair work. With the `parallel`
//! feature the map runs on the rayon pool; results always come back in
//! input order so downstream reductions are deterministic.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    pub fn from_flag(parallel: bool) -> Self {
        if parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

#[cfg(feature = "parallel")]
pub fn map_ordered<T, R, F>(items: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    match exec {
        Execution::Parallel => items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect(),
        Execution::Sequential => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, R, F>(items: &[T], _exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_kept() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = map_ordered(&xs, Execution::Parallel, |i, x| (i as u64) * x);
        let b = map_ordered(&xs, Execution::Sequential, |i, x| (i as u64) * x);
        assert_eq!(a, b);
    }
}
