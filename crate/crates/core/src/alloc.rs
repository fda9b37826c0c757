//! Heap accounting for the cost harness.
//!
//! Install with `#[global_allocator] static A: TrackingAllocator = TrackingAllocator;`
//! in a binary; the counters stay at zero otherwise.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

/// System allocator that records live and peak heap bytes.
pub struct TrackingAllocator;

fn record_alloc(size: usize) {
    let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            record_alloc(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            record_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            record_alloc(new_size);
        }
        p
    }
}

impl TrackingAllocator {
    /// Marks the allocator as installed. Call once from the binary that installs it.
    pub fn activate() {
        ACTIVE.store(true, Ordering::Relaxed);
    }
}

/// Peak-memory probe used by the cost harness.
pub trait MemoryProbe {
    /// Starts a new measurement window at the current live size.
    fn reset_peak(&self);
    /// Peak live heap bytes since the last reset, or `None` when not measurable.
    fn peak_bytes(&self) -> Option<usize>;
}

/// Probe backed by [`TrackingAllocator`].
pub struct HeapProbe;

impl MemoryProbe for HeapProbe {
    fn reset_peak(&self) {
        PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    fn peak_bytes(&self) -> Option<usize> {
        ACTIVE.load(Ordering::Relaxed).then(|| PEAK.load(Ordering::Relaxed))
    }
}

/// Probe for processes without the tracking allocator.
pub struct NoProbe;

impl MemoryProbe for NoProbe {
    fn reset_peak(&self) {}

    fn peak_bytes(&self) -> Option<usize> {
        None
    }
}
