//! Per-thread allocation accounting.
//!
//! Install [`TrackingAllocator`] as the `#[global_allocator]` of a binary or
//! test target, then wrap a computation in [`measure`] to learn the peak
//! number of live bytes it allocated on the calling thread and the largest
//! single request. Without the allocator installed, [`AllocStats::tracked`]
//! is false and the counters stay zero.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::Serialize;

static INSTALLED: AtomicBool = AtomicBool::new(false);

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
    static LARGEST: Cell<usize> = const { Cell::new(0) };
    static COUNT: Cell<usize> = const { Cell::new(0) };
}

/// `System` allocator that feeds the thread-local counters while a
/// [`measure`] call is active on the allocating thread.
pub struct TrackingAllocator;

fn on_alloc(size: usize) {
    let _ = ACTIVE.try_with(|active| {
        if !active.get() {
            return;
        }
        let live = LIVE.with(|l| {
            let v = l.get() + size as isize;
            l.set(v);
            v
        });
        PEAK.with(|p| p.set(p.get().max(live)));
        LARGEST.with(|l| l.set(l.get().max(size)));
        COUNT.with(|c| c.set(c.get() + 1));
    });
}

fn on_dealloc(size: usize) {
    let _ = ACTIVE.try_with(|active| {
        if active.get() {
            LIVE.with(|l| l.set(l.get() - size as isize));
        }
    });
}

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        on_alloc(layout.size());
        System.alloc(layout)
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        on_alloc(layout.size());
        System.alloc_zeroed(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        on_dealloc(layout.size());
        System.dealloc(ptr, layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        on_dealloc(layout.size());
        on_alloc(new_size);
        System.realloc(ptr, layout, new_size)
    }
}

/// Allocation profile of one [`measure`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AllocStats {
    /// Whether [`TrackingAllocator`] is the global allocator.
    pub tracked: bool,
    /// Maximum of (bytes allocated - bytes freed) during the call.
    pub peak_bytes: usize,
    /// Largest single allocation request.
    pub largest_bytes: usize,
    pub allocations: usize,
}

/// Runs `f` and reports its allocation profile on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, AllocStats) {
    LIVE.with(|c| c.set(0));
    PEAK.with(|c| c.set(0));
    LARGEST.with(|c| c.set(0));
    COUNT.with(|c| c.set(0));
    ACTIVE.with(|a| a.set(true));
    let out = f();
    ACTIVE.with(|a| a.set(false));
    let stats = AllocStats {
        tracked: INSTALLED.load(Ordering::Relaxed),
        peak_bytes: PEAK.with(|c| c.get()).max(0) as usize,
        largest_bytes: LARGEST.with(|c| c.get()),
        allocations: COUNT.with(|c| c.get()),
    };
    (out, stats)
}
