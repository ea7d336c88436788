//! Attention logits with 3D rotary embeddings depend only on relative positions.

use georecon::diffcore::{attention_logits, rope3d_tensor, Tensor};
use rand::{Rng, SeedableRng};

fn main() -> georecon::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let (n, width, heads) = (6, 24, 2);
    let q = Tensor::<f64>::randn(&[n, width], 1.0, &mut rng);
    let k = Tensor::<f64>::randn(&[n, width], 1.0, &mut rng);
    let c: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-0.5..0.5)).collect();
    let logits = |coords: &[f64]| -> georecon::Result<Tensor<f64>> {
        Ok(attention_logits(&rope3d_tensor(&q, coords, heads)?, &rope3d_tensor(&k, coords, heads)?, heads))
    };
    let base = logits(&c)?;
    for shift in [[0.3, 0.0, 0.0], [-1.0, 2.0, 0.5], [10.0, -7.0, 3.0]] {
        let moved: Vec<f64> = c.iter().enumerate().map(|(i, &x)| x + shift[i % 3]).collect();
        println!("translate by {shift:?}: max logit change {:.2e}", base.max_abs_diff(&logits(&moved)?));
    }
    let scaled: Vec<f64> = c.iter().map(|x| x * 2.0).collect();
    println!("scale by 2 (not a symmetry): max logit change {:.2e}", base.max_abs_diff(&logits(&scaled)?));
    Ok(())
}
