//! Min-max calibration, fake quantization and the scale gradient.

use predquant::quant::{compute_range_scale, fake_quantize, scale_gradient, DegeneratePolicy};
use predquant::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn([1, 4096], 1.0, &mut rng);
    for bits in [2, 4, 8] {
        let p = compute_range_scale(&x, bits, None, DegeneratePolicy::Error)?;
        let q = fake_quantize(&x, &p)?;
        let mut levels: Vec<f32> = q.data().to_vec();
        levels.sort_by(f32::total_cmp);
        levels.dedup();
        let mse: f32 = x.data().iter().zip(q.data()).map(|(a, b)| (a - b).powi(2)).sum::<f32>() / x.numel() as f32;
        let grad = scale_gradient(&x, &p, &Tensor::ones([1, 4096]))?;
        println!(
            "W{bits}: S = {:.5}, Z = {}, {} levels, mse {mse:.2e}, dSum/dS {grad:.3}",
            p.scale(),
            p.zero_point(),
            levels.len()
        );
    }
    Ok(())
}
