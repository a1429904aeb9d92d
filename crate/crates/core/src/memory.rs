//! Peak-allocation tracking for the attention memory sweep.
//!
//! [`TrackingAllocator`] only counts when a binary installs it with
//! `#[global_allocator]`; otherwise [`measure_attention_peak`] returns `None`.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nncore::layers::{Builder, StackShape, TransformerEncoder};
use crate::nncore::{Component, Graph, ParameterSet, Tensor};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

/// System allocator wrapper that records live and peak bytes.
pub struct TrackingAllocator;

impl TrackingAllocator {
    fn grow(n: usize) {
        let now = CURRENT.fetch_add(n, Ordering::Relaxed) + n;
        PEAK.fetch_max(now, Ordering::Relaxed);
        ACTIVE.store(true, Ordering::Relaxed);
    }

    fn shrink(n: usize) {
        CURRENT.fetch_sub(n, Ordering::Relaxed);
    }
}

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            Self::grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            Self::grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        Self::shrink(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size >= layout.size() {
                Self::grow(new_size - layout.size());
            } else {
                Self::shrink(layout.size() - new_size);
            }
        }
        p
    }
}

/// Whether a [`TrackingAllocator`] is installed and has seen allocations.
pub fn tracking_active() -> bool {
    let _probe = Box::new(0u64);
    ACTIVE.load(Ordering::Relaxed)
}

pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// Resets the peak to the current live size and returns that size.
pub fn reset_peak() -> usize {
    let now = CURRENT.load(Ordering::Relaxed);
    PEAK.store(now, Ordering::Relaxed);
    now
}

pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Peak bytes allocated above baseline by one forward and backward pass of
/// a self-attention encoder stack over `batch` sequences of length `len`.
///
/// The counters are process-wide, so concurrent allocation on other
/// threads inflates the figure.
pub fn measure_attention_peak(
    len: usize,
    layers: usize,
    heads: usize,
    batch: usize,
    dim: usize,
) -> Result<Option<u64>> {
    if !tracking_active() {
        return Ok(None);
    }
    let mut params = ParameterSet::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = {
        let mut b = Builder::new(&mut params, &mut rng, "", Component::ContextTransformer);
        TransformerEncoder::new(
            &mut b,
            StackShape {
                layers,
                dim,
                heads,
                ff_mult: 4,
                dropout: 0.0,
            },
        )?
    };
    let data: Vec<f32> = (0..batch * len * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::from_vec(batch * len, dim, data)?;
    let lengths = vec![len; batch];
    let base = reset_peak();
    {
        let mut g = Graph::train(&params, None);
        let xv = g.input(x);
        let h = enc.forward(&mut g, xv, &lengths)?;
        let loss = g.mean(h);
        let grads = g.backward(loss)?;
        std::hint::black_box(&grads);
    }
    Ok(Some(peak_bytes().saturating_sub(base) as u64))
}
