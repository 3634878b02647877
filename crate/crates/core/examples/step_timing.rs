//! Wall-clock cost of one training step and one evaluation batch.

use std::time::Instant;

use aad_core::model::{AadModel, AblationMode, ModelConfig, TrialBatch};
use aad_core::tensor::{Mode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> aad_core::Result<()> {
    aad_core::tensor::retain_heap();
    let b: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0));
    let batch = TrialBatch { eeg: t(&[b, 192, 10]), spec_a: t(&[b, 151, 257]), spec_b: t(&[b, 151, 257]) };
    let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
    let mut model = AadModel::<f32>::new(ModelConfig::default(), 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for round in 0..3 {
        let start = Instant::now();
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape);
        let logits = model.forward(&mut tape, &vars, &batch, Mode::Train, AblationMode::None, &mut rng)?;
        let fwd = start.elapsed();
        let (loss, _) = tape.softmax_cross_entropy(logits, &labels)?;
        tape.backward(loss)?;
        model.params_mut().collect_grads(&mut tape, &vars);
        let total = start.elapsed();
        let start = Instant::now();
        model.predict(&batch, AblationMode::None)?;
        let eval = start.elapsed();
        println!("round {round}: forward {fwd:?}, train step {total:?}, eval {eval:?} (batch {b})");
    }
    Ok(())
}
