//! Path-level parallelism with deterministic results.
//!
//! Library routines fan out over path indices with rayon and always collect
//! results in index order before reducing, so the worker count never changes
//! a single bit of output. Callers choose the worker count with
//! [`with_workers`].

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Environment variable consulted by [`Workers::from_env`].
pub const WORKERS_ENV: &str = "ERGODIC_BEM_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Workers {
    #[default]
    Auto,
    Fixed(usize),
}

impl Workers {
    /// Read `ERGODIC_BEM_WORKERS`; unset means `Auto`.
    pub fn from_env() -> Result<Self> {
        match std::env::var(WORKERS_ENV) {
            Ok(v) => v.parse(),
            Err(_) => Ok(Workers::Auto),
        }
    }
}

impl FromStr for Workers {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Workers::Auto);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Workers::Fixed(n)),
            _ => Err(Error::config(format!("workers must be a positive integer or \"auto\", got '{s}'"))),
        }
    }
}

impl fmt::Display for Workers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Workers::Auto => write!(f, "auto"),
            Workers::Fixed(n) => write!(f, "{n}"),
        }
    }
}

impl Serialize for Workers {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

/// Run `op` with the requested number of worker threads.
pub fn with_workers<R: Send>(workers: Workers, op: impl FnOnce() -> R + Send) -> Result<R> {
    match workers {
        Workers::Auto => Ok(op()),
        Workers::Fixed(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;
            Ok(pool.install(op))
        }
    }
}

/// Evaluate `f(0..n)` in parallel; results come back in index order.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Evaluate `f` over fixed-size index chunks in parallel. The chunk layout
/// depends only on `n` and `chunk`, never on the worker count.
pub(crate) fn map_chunks<T, F>(n: usize, chunk: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> Result<T> + Sync + Send,
{
    let chunk = chunk.max(1);
    let n_chunks = n.div_ceil(chunk);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| f(c * chunk..((c + 1) * chunk).min(n)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_workers() {
        assert_eq!("auto".parse::<Workers>().unwrap(), Workers::Auto);
        assert_eq!("4".parse::<Workers>().unwrap(), Workers::Fixed(4));
        assert!("0".parse::<Workers>().is_err());
        assert!("many".parse::<Workers>().is_err());
    }

    #[test]
    fn order_is_preserved_for_any_pool() {
        let serial: Vec<usize> = with_workers(Workers::Fixed(1), || map_indexed(100, |i| Ok(i * i)))
            .unwrap()
            .unwrap();
        let wide: Vec<usize> = with_workers(Workers::Fixed(4), || map_indexed(100, |i| Ok(i * i)))
            .unwrap()
            .unwrap();
        assert_eq!(serial, wide);
        let chunks = map_chunks(10, 4, |r| Ok(r.len())).unwrap();
        assert_eq!(chunks, vec![4, 4, 2]);
    }
}
