use signtok_core::memory::{measure_attention_peak, tracking_active, TrackingAllocator};
use signtok_core::metrics::{attention_memory_profile, quadratic_fit};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

// One test per binary keeps the process-wide counters free of other threads.
#[test]
fn measured_peak_grows_quadratically() {
    assert!(tracking_active());
    let lens = [32usize, 64, 96, 128, 160, 192, 224, 256];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &l in &lens {
        let peak = measure_attention_peak(l, 2, 4, 1, 32).unwrap().unwrap();
        xs.push(l as f64);
        ys.push(peak as f64);
    }
    let (c, r2) = quadratic_fit(&xs, &ys).unwrap();
    assert!(r2 >= 0.95, "r2 {r2}");
    assert!(c[2] > 0.0);
    let analytic = attention_memory_profile(256, 2, 4, 1, 32);
    // f32 scores and softmax output alone are a lower bound on the quadratic term.
    assert!(c[2] * 256.0 * 256.0 >= 0.5 * 2.0 * 4.0 * analytic.score_elements as f64);
}
