use cotasim_core::decoder::InputSequence;
use cotasim_core::model::TokenId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded random prompts over `0..vocab_size - 1`, leaving out the mask id.
pub fn make_corpus(
    n: usize,
    prefix_length: usize,
    response_length: usize,
    vocab_size: usize,
    seed: u64,
) -> Vec<InputSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let upper = vocab_size.saturating_sub(1).max(1) as TokenId;
    (0..n)
        .map(|_| InputSequence {
            prefix: (0..prefix_length)
                .map(|_| rng.gen_range(0..upper))
                .collect(),
            response_len: response_length,
        })
        .collect()
}
