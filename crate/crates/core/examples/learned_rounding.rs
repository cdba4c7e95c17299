//! Learned up/down rounding: soft vs hard weights and the annealed
//! rounding regularizer.

use predquant::quant::{
    adaround_fake_quantize, compute_range_scale, fake_quantize, rounding_regularizer, BetaSchedule, DegeneratePolicy,
    RoundingMode, RoundingVars,
};
use predquant::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = Tensor::randn([4, 16], 0.5, &mut rng);
    let p = compute_range_scale(&w, 3, Some(0), DegeneratePolicy::Error)?;
    let mut r = RoundingVars::init_from_weight(&w, &p)?;

    let soft = adaround_fake_quantize(&w, &p, &r, RoundingMode::Soft)?;
    let gap: f32 = soft.data().iter().zip(w.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    println!("initial max |soft - w| {gap:.2e} (nonzero only where the grid clamps)");

    let sched = BetaSchedule::default();
    for it in [0, 200, 400, 700, 1000] {
        r.beta = sched.beta(it, 1000);
        println!(
            "iter {it:4}: active {} beta {:5.2} reg {:.3}",
            sched.active(it, 1000),
            r.beta,
            rounding_regularizer(&r)
        );
    }

    // Push every offset to its nearest end, as the regularizer does.
    for t in r.theta.data_mut() {
        *t = if *t > 0.0 { 12.0 } else { -12.0 };
    }
    let hard = adaround_fake_quantize(&w, &p, &r, RoundingMode::Hard)?;
    let soft = adaround_fake_quantize(&w, &p, &r, RoundingMode::Soft)?;
    println!(
        "saturated: reg {:.3}, hard == soft: {}, matches nearest rounding: {}",
        rounding_regularizer(&r),
        hard == soft,
        hard == fake_quantize(&w, &p)?
    );
    Ok(())
}
