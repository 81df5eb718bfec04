//! A counting wrapper around the system allocator.
//!
//! Install it in a binary or test target with
//! `#[global_allocator] static A: PeakAlloc = PeakAlloc;` and bracket the
//! region of interest with a [`PeakWindow`]. Counters are process-wide.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

pub struct PeakAlloc;

impl PeakAlloc {
    /// Bytes currently allocated through this allocator.
    pub fn current() -> usize {
        CURRENT.load(Ordering::Relaxed)
    }

    /// High-water mark since the last [`PeakAlloc::reset_peak`].
    pub fn peak() -> usize {
        PEAK.load(Ordering::Relaxed)
    }

    /// Sets the high-water mark to the current usage and returns it.
    pub fn reset_peak() -> usize {
        let now = CURRENT.load(Ordering::Relaxed);
        PEAK.store(now, Ordering::Relaxed);
        now
    }

    /// True once any allocation has gone through the wrapper, i.e. it is the
    /// process's global allocator.
    pub fn is_installed() -> bool {
        drop(std::hint::black_box(Box::new(0u64)));
        ACTIVE.load(Ordering::Relaxed)
    }

    fn grow(by: usize) {
        let now = CURRENT.fetch_add(by, Ordering::Relaxed) + by;
        PEAK.fetch_max(now, Ordering::Relaxed);
    }

    fn shrink(by: usize) {
        CURRENT.fetch_sub(by, Ordering::Relaxed);
    }
}

unsafe impl GlobalAlloc for PeakAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let ptr = System.alloc(layout);
        if !ptr.is_null() {
            ACTIVE.store(true, Ordering::Relaxed);
            Self::grow(layout.size());
        }
        ptr
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let ptr = System.alloc_zeroed(layout);
        if !ptr.is_null() {
            ACTIVE.store(true, Ordering::Relaxed);
            Self::grow(layout.size());
        }
        ptr
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        Self::shrink(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let out = System.realloc(ptr, layout, new_size);
        if !out.is_null() {
            if new_size >= layout.size() {
                Self::grow(new_size - layout.size());
            } else {
                Self::shrink(layout.size() - new_size);
            }
        }
        out
    }
}

/// Measures the allocation high-water mark above the usage at construction.
#[derive(Debug)]
pub struct PeakWindow {
    baseline: usize,
}

impl PeakWindow {
    pub fn start() -> Self {
        Self {
            baseline: PeakAlloc::reset_peak(),
        }
    }

    pub fn peak_bytes(&self) -> u64 {
        PeakAlloc::peak().saturating_sub(self.baseline) as u64
    }
}
