//! Local and prediction-level distances between an FP and a perturbed
//! output.

use predquant::metrics::{local_cosine, local_mse, pd_cosine, pd_kl, pd_mse, Prediction};
use predquant::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fp = Tensor::randn([64, 10], 2.0, &mut rng);
    println!("{:>6} {:>10} {:>10} {:>10} {:>10} {:>10}", "noise", "mse", "cosine", "pd_mse", "pd_cos", "pd_kl");
    for noise in [0.0, 0.1, 0.5, 1.0, 2.0] {
        let eps = Tensor::randn([64, 10], noise, &mut rng);
        let q = fp.zip_map(&eps, |a, b| a + b)?;
        let (pf, pq) = (Prediction::from_logits(fp.clone(), 1.0)?, Prediction::from_logits(q.clone(), 1.0)?);
        println!(
            "{noise:>6.1} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            local_mse(&fp, &q)?,
            local_cosine(&fp, &q)?,
            pd_mse(&pf, &pq)?,
            pd_cosine(&pf, &pq)?,
            pd_kl(&pf, &pq)?
        );
    }
    // A pure logit shift leaves every prediction metric at zero.
    let shifted = fp.map(|v| v + 3.0);
    let (pf, ps) = (Prediction::from_logits(fp.clone(), 1.0)?, Prediction::from_logits(shifted.clone(), 1.0)?);
    println!("shift by 3: local_mse {:.2}, pd_kl {:.2e}", local_mse(&fp, &shifted)?, pd_kl(&pf, &ps)?);
    Ok(())
}
