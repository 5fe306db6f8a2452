//! Allocator tuning for the training loop.
//!
//! Each training step allocates and frees tens of megabytes of activations. With
//! glibc's defaults those blocks are served by fresh `mmap`s and returned on free,
//! so every step pays for page faults again. Raising the mmap and trim thresholds
//! keeps the freed memory in the heap for reuse.

use std::sync::Once;

static TUNE: Once = Once::new();

/// Idempotent; a no-op on non-glibc targets.
pub fn retain_freed_memory() {
    TUNE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        }
    });
}
