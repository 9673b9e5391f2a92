//! Local memory-bandwidth microbenchmark over the four classic streaming
//! kernels. Results are verified against direct evaluation after timing so
//! the compiler cannot elide the work.

use anyhow::{bail, Result};
use std::hint::black_box;
use std::sync::Barrier;
use std::time::Instant;

const SCALAR: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKernel {
    Copy,
    Scale,
    Add,
    Triad,
}

impl StreamKernel {
    pub const ALL: [StreamKernel; 4] = [
        StreamKernel::Copy,
        StreamKernel::Scale,
        StreamKernel::Add,
        StreamKernel::Triad,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StreamKernel::Copy => "copy",
            StreamKernel::Scale => "scale",
            StreamKernel::Add => "add",
            StreamKernel::Triad => "triad",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(StreamKernel::Copy),
            "scale" => Ok(StreamKernel::Scale),
            "add" => Ok(StreamKernel::Add),
            "triad" => Ok(StreamKernel::Triad),
            other => bail!("unknown kernel {other:?} (copy|scale|add|triad)"),
        }
    }

    /// Arrays touched per element per pass (reads + writes).
    pub fn arrays_touched(&self) -> usize {
        match self {
            StreamKernel::Copy | StreamKernel::Scale => 2,
            StreamKernel::Add | StreamKernel::Triad => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub kernel: StreamKernel,
    pub elements: usize,
    pub bytes_moved: usize,
    pub best_seconds: f64,
    pub bytes_per_second: f64,
}

#[allow(clippy::manual_memcpy)] // the explicit element loop IS the measured kernel
fn run_pass(kernel: StreamKernel, a: &mut [f64], b: &mut [f64], c: &mut [f64]) {
    match kernel {
        StreamKernel::Copy => {
            for i in 0..a.len() {
                c[i] = a[i];
            }
        }
        StreamKernel::Scale => {
            for i in 0..a.len() {
                b[i] = SCALAR * c[i];
            }
        }
        StreamKernel::Add => {
            for i in 0..a.len() {
                c[i] = a[i] + b[i];
            }
        }
        StreamKernel::Triad => {
            for i in 0..a.len() {
                a[i] = b[i] + SCALAR * c[i];
            }
        }
    }
}

fn verify(kernel: StreamKernel, a: &[f64], b: &[f64], c: &[f64]) -> Result<()> {
    // Spot-check a handful of positions against direct evaluation.
    let idxs = [0, a.len() / 3, a.len() / 2, a.len() - 1];
    for &i in &idxs {
        let ok = match kernel {
            StreamKernel::Copy => c[i] == a[i],
            StreamKernel::Scale => b[i] == SCALAR * c[i],
            StreamKernel::Add => c[i] == a[i] + b[i],
            StreamKernel::Triad => a[i] == b[i] + SCALAR * c[i],
        };
        if !ok {
            bail!("{} kernel produced a wrong value at {i}", kernel.name());
        }
    }
    Ok(())
}

/// Best-of-`repeats` bandwidth per kernel over `mib` MiB buffers, with one
/// discarded warm-up pass. `threads` workers split the index range and
/// synchronize on a barrier before timing starts.
pub fn bench_memory(
    mib: usize,
    kernels: &[StreamKernel],
    repeats: usize,
    threads: usize,
) -> Result<Vec<BenchResult>> {
    if mib < 1 {
        bail!("buffer must be at least 1 MiB");
    }
    if repeats < 3 {
        bail!("need at least 3 repeats");
    }
    let threads = threads.max(1);
    let n = mib * 1024 * 1024 / std::mem::size_of::<f64>();
    let mut results = Vec::new();
    for &kernel in kernels {
        let mut a = vec![1.0f64; n];
        let mut b = vec![2.0f64; n];
        let mut c = vec![0.5f64; n];
        let mut best = f64::INFINITY;
        for pass in 0..=repeats {
            let elapsed = if threads == 1 {
                let start = Instant::now();
                run_pass(kernel, &mut a, &mut b, &mut c);
                start.elapsed().as_secs_f64()
            } else {
                timed_threaded_pass(kernel, &mut a, &mut b, &mut c, threads)
            };
            black_box((&a[0], &b[0], &c[0]));
            if pass > 0 {
                best = best.min(elapsed);
            }
        }
        verify(kernel, &a, &b, &c)?;
        let bytes_moved = kernel.arrays_touched() * n * std::mem::size_of::<f64>();
        results.push(BenchResult {
            kernel,
            elements: n,
            bytes_moved,
            best_seconds: best,
            bytes_per_second: bytes_moved as f64 / best,
        });
    }
    Ok(results)
}

fn timed_threaded_pass(
    kernel: StreamKernel,
    a: &mut [f64],
    b: &mut [f64],
    c: &mut [f64],
    threads: usize,
) -> f64 {
    let n = a.len();
    let chunk = n.div_ceil(threads);
    let barrier = Barrier::new(threads);
    let start = Instant::now();
    std::thread::scope(|scope| {
        let mut rest_a = &mut a[..];
        let mut rest_b = &mut b[..];
        let mut rest_c = &mut c[..];
        for _ in 0..threads {
            let take = chunk.min(rest_a.len());
            let (ca, ra) = rest_a.split_at_mut(take);
            let (cb, rb) = rest_b.split_at_mut(take);
            let (cc, rc) = rest_c.split_at_mut(take);
            rest_a = ra;
            rest_b = rb;
            rest_c = rc;
            let barrier = &barrier;
            scope.spawn(move || {
                barrier.wait();
                run_pass(kernel, ca, cb, cc);
            });
        }
    });
    start.elapsed().as_secs_f64()
}
