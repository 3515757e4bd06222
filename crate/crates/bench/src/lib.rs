//! Seeded workload generators for the kernel benchmarks.

use groundforge::boxes::{TextBoxItem, TextBoxPool};
use groundforge::explain::ActivationStack;
use groundforge::{rasterize_box, BBox, BoxMask, EvalSample, Heatmap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_heatmap(rng: &mut impl Rng, h: usize, w: usize) -> Heatmap {
    let values = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    Heatmap::new(h, w, values).expect("positive shape")
}

pub fn random_box(rng: &mut impl Rng) -> BBox {
    let w = rng.gen_range(0.1..0.6);
    let h = rng.gen_range(0.1..0.6);
    let x = rng.gen_range(0.0..1.0 - w);
    let y = rng.gen_range(0.0..1.0 - h);
    BBox::new(x, y, x + w, y + h).expect("box inside the unit square")
}

/// A heatmap and a non-degenerate box mask of the same shape.
pub fn amc_case(seed: u64, side: usize) -> (Heatmap, BoxMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = random_heatmap(&mut rng, side, side);
    loop {
        if let Ok(mask) = rasterize_box(&random_box(&mut rng), side, side) {
            return (map, mask);
        }
    }
}

pub fn activation_stack(seed: u64, channels: usize, side: usize) -> ActivationStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let n = channels * side * side;
    let acts = values(n);
    let grads = values(n);
    ActivationStack::new(channels, side, side, acts, grads).expect("consistent shapes")
}

pub fn eval_samples(seed: u64, n: usize, side: usize, image: usize) -> Vec<EvalSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| EvalSample {
            sample_id: format!("s{i}"),
            heatmap: random_heatmap(&mut rng, side, side),
            image_h: image,
            image_w: image,
            gt_boxes: vec![random_box(&mut rng)],
        })
        .collect()
}

pub fn box_pool(seed: u64, n: usize) -> TextBoxPool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|i| TextBoxItem {
            phrase: format!("object {i}"),
            bbox: random_box(&mut rng),
        })
        .collect();
    TextBoxPool::new(format!("pool-{seed}"), items)
}
