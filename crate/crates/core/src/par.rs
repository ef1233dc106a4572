//! Order-preserving map over independent work items.
//!
//! With the `parallel` feature the default [`map`] runs on the rayon pool;
//! without it everything is sequential. Results come back in input order
//! either way, so outputs do not depend on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Sequential map.
pub fn map_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Data-parallel map; falls back to [`map_seq`] without the `parallel` feature.
pub fn map_par<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_seq(items, f)
    }
}

/// Strategy used by the default [`map`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

impl Mode {
    pub const DEFAULT: Mode = if cfg!(feature = "parallel") {
        Mode::Parallel
    } else {
        Mode::Sequential
    };
}

pub fn map_with<T, U, F>(mode: Mode, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match mode {
        Mode::Sequential => map_seq(items, f),
        Mode::Parallel => map_par(items, f),
    }
}

pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    map_with(Mode::DEFAULT, items, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let items: Vec<u64> = (0..1000).collect();
        let f = |x: &u64| x.wrapping_mul(2654435761) % 97;
        let seq = map_seq(&items, f);
        assert_eq!(map_par(&items, f), seq);
        assert_eq!(map(&items, f), seq);
        assert_eq!(seq[3], 3u64.wrapping_mul(2654435761) % 97);
    }
}
