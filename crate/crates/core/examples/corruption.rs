//! Show the denoising corruption applied to pre-training documents:
//! sentence shuffling followed by span infilling.
//!
//!     cargo run --example corruption

use layerexit::pretrain::{corrupt, document_rng, infill_spans, shuffle_sentences, CorruptionConfig};
use layerexit::tokenizer::Vocabulary;

fn main() -> layerexit::Result<()> {
    let doc = "the river rose after the storm . farmers moved their cattle to the hills . \
               by morning the water had reached the old bridge . nobody crossed it for a week .";
    let vocab = Vocabulary::build([doc], 100)?;
    let ids = vocab.encode(doc);
    let stop = vocab.full_stop();
    let cfg = CorruptionConfig::default();

    let mut rng = document_rng(cfg.rng_seed, 0);
    println!("original  {}", vocab.decode(&ids)?);
    println!("shuffled  {}", vocab.decode(&shuffle_sentences(&ids, stop.unwrap(), &mut rng))?);
    let infilled = infill_spans(&ids, &cfg, &mut rng)?;
    println!("infilled  {}", vocab.decode(&infilled.ids)?);
    println!(
        "          {} of {} tokens masked, span lengths drawn {:?}",
        infilled.masked_tokens,
        ids.len(),
        infilled.drawn_lengths
    );

    // each document index has its own stream: the same document corrupts
    // the same way no matter what was processed before it
    for index in 0..3 {
        let noisy = corrupt(&ids, stop, &cfg, &mut document_rng(7, index))?;
        println!("doc #{index}    {}", vocab.decode(&noisy)?);
    }
    Ok(())
}
