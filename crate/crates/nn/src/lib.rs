//! Minimal reverse-mode autodiff over dynamically shaped `f64` arrays, plus
//! the parameter store, AdamW optimizer and seeded RNG helpers shared by the
//! training code in this workspace.
//!
//! Everything runs in double precision on the CPU. Matrix products go through
//! ndarray's BLAS backend; all other kernels are plain Rust loops so results
//! are bit-reproducible for a fixed seed.

extern crate blas_src;

pub mod attention;
pub mod conv;
pub mod math;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;

pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, NodeId, Tape};

extern "C" {
    fn openblas_set_num_threads(n: i32);
    fn mallopt(param: i32, value: i32) -> i32;
}

const M_TRIM_THRESHOLD: i32 = -1;
const M_MMAP_THRESHOLD: i32 = -3;

/// One-time process tuning. Pins the BLAS pool to one thread unless the user
/// set `OPENBLAS_NUM_THREADS` themselves (the workspace's matrices are small
/// enough that OpenBLAS's spin-waiting workers cost more than they save, and
/// a fixed thread count keeps results bit-reproducible run to run), and
/// raises the malloc mmap/trim thresholds so the megabyte-sized tape buffers
/// are recycled in the heap instead of being mapped and unmapped every step.
pub fn configure_blas() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        if std::env::var_os("OPENBLAS_NUM_THREADS").is_none() {
            unsafe { openblas_set_num_threads(1) };
        }
        unsafe {
            mallopt(M_MMAP_THRESHOLD, 1 << 30);
            mallopt(M_TRIM_THRESHOLD, 1 << 30);
        }
    });
}
