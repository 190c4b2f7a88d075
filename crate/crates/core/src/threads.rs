//! Worker-pool sizing from `RSRDIFF_THREADS`.

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "RSRDIFF_THREADS";

/// Parses a thread cap; unset or empty means no cap.
pub fn parse_thread_cap(value: Option<&str>) -> Result<Option<usize>> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

/// Sizes the global pool to `min(cap, available cores)`. Returns the worker
/// count in effect; a pool that is already running is left as is.
pub fn configure_threads() -> Result<usize> {
    let cap = parse_thread_cap(std::env::var(THREADS_ENV).ok().as_deref())?;
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let n = cap.map_or(cores, |c| c.min(cores));
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(rayon::current_num_threads())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caps() {
        assert_eq!(parse_thread_cap(None).unwrap(), None);
        assert_eq!(parse_thread_cap(Some(" ")).unwrap(), None);
        assert_eq!(parse_thread_cap(Some("3")).unwrap(), Some(3));
        assert!(parse_thread_cap(Some("0")).is_err());
        assert!(parse_thread_cap(Some("many")).is_err());
    }
}
