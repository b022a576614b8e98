//! Independent jobs (τ sweeps, random-graph trials) fanned out over a rayon
//! pool, with a sequential path for comparison and for builds without the
//! `parallel` feature. Each job itself stays single-threaded.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    /// What `Parallel` actually means in this build.
    pub fn effective(self) -> Self {
        if cfg!(feature = "parallel") {
            self
        } else {
            Execution::Sequential
        }
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec.effective() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn parallel_matches_sequential(xs in proptest::collection::vec(-1e3..1e3f64, 0..200)) {
            let f = |x: &f64| (x * 1.5).sin() + x.powi(2);
            prop_assert_eq!(map(&xs, Execution::Parallel, f), map(&xs, Execution::Sequential, f));
        }
    }

    #[test]
    fn empty_batch() {
        let out: Vec<u8> = map(&[] as &[u8], Execution::Parallel, |x| *x);
        assert!(out.is_empty());
    }
}
