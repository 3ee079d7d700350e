mod common;

use common::{overfit_config, overfit_sixteen, toy_examples};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use synthcap::decoder::{train_decoder, DecoderConfig, DecoderModel};

#[test]
fn sixteen_captions_are_memorized() {
    let r = overfit_sixteen();
    assert!(r.final_loss < 0.1, "final loss {}", r.final_loss);
    for (e, pair) in r.history.windows(2).enumerate() {
        assert!(
            pair[1] <= pair[0] * 1.05,
            "epoch {} rose from {} to {}",
            e + 1,
            pair[0],
            pair[1]
        );
    }
    assert!(r.exact >= 15, "reconstructed {}/{}", r.exact, r.total);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (examples, vocab, spec) = toy_examples(4);
    let cfg = DecoderConfig {
        learning_rate: 0.0,
        epochs: 2,
        ..overfit_config()
    };
    let mut model = DecoderModel::new(
        &cfg,
        vocab.len(),
        spec.dim,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let before = model.clone();
    train_decoder(&mut model, &examples, &cfg).unwrap();
    assert_eq!(model, before);
}
