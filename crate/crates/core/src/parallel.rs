//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers dispatch to rayon; without it,
//! or when the calling thread has selected [`ExecMode::Sequential`], they run inline.
//! Every helper produces results in input order, and callers only reduce over those
//! ordered results, so both modes yield bit-identical output.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Parallel,
    Sequential,
}

thread_local! {
    static MODE: Cell<ExecMode> = const { Cell::new(default_mode()) };
}

const fn default_mode() -> ExecMode {
    if cfg!(feature = "parallel") {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

/// Execution mode for helpers invoked from the current thread.
pub fn exec_mode() -> ExecMode {
    MODE.with(|m| m.get())
}

/// Sets the execution mode for the current thread. Selecting `Parallel` without the
/// `parallel` feature is a no-op.
pub fn set_exec_mode(mode: ExecMode) {
    let mode = if cfg!(feature = "parallel") {
        mode
    } else {
        ExecMode::Sequential
    };
    MODE.with(|m| m.set(mode));
}

/// Runs `f` with the given mode, restoring the previous one afterwards.
pub fn with_exec_mode<R>(mode: ExecMode, f: impl FnOnce() -> R) -> R {
    let prev = exec_mode();
    set_exec_mode(mode);
    let out = f();
    set_exec_mode(prev);
    out
}

fn use_rayon(n: usize) -> bool {
    n > 1 && exec_mode() == ExecMode::Parallel
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if use_rayon(n) {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = use_rayon;
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, returning results in order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Send + Sync,
{
    map_indexed(items.len(), |i| f(&items[i]))
}

/// Calls `f(index, chunk)` for consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    assert!(chunk > 0, "chunk size must be positive");
    #[cfg(feature = "parallel")]
    if use_rayon(data.len() / chunk) {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_chunk_mut`] but over two buffers chunked in lockstep.
pub fn for_each_chunk_pair_mut<A, B, F>(a: &mut [A], ca: usize, b: &mut [B], cb: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Send + Sync,
{
    assert!(ca > 0 && cb > 0, "chunk sizes must be positive");
    assert_eq!(a.len() / ca, b.len() / cb, "chunk counts differ");
    #[cfg(feature = "parallel")]
    if use_rayon(a.len() / ca) {
        use rayon::prelude::*;
        a.par_chunks_mut(ca)
            .zip(b.par_chunks_mut(cb))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
        return;
    }
    a.chunks_mut(ca)
        .zip(b.chunks_mut(cb))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let a = with_exec_mode(ExecMode::Parallel, || map_indexed(1000, f));
        let b = with_exec_mode(ExecMode::Sequential, || map_indexed(1000, f));
        assert_eq!(a, b);
    }

    #[test]
    fn chunks_cover_everything() {
        let mut v = vec![0usize; 100];
        for_each_chunk_mut(&mut v, 7, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v[0], 0);
        assert_eq!(v[99], 14);
    }

    #[test]
    fn mode_is_restored() {
        let before = exec_mode();
        with_exec_mode(ExecMode::Sequential, || {
            assert_eq!(exec_mode(), ExecMode::Sequential)
        });
        assert_eq!(exec_mode(), before);
    }
}
