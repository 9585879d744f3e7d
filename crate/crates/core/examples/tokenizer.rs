//! Build a word vocabulary, round-trip text through it and persist it.
//!
//!     cargo run --example tokenizer

use layerexit::tokenizer::{split_words, Vocabulary, UNK};

fn main() -> layerexit::Result<()> {
    let corpus = [
        "The cat sat on the mat.",
        "The dog sat on the log.",
        "A bird flew over the mat, then the log.",
    ];
    let vocab = Vocabulary::build(corpus, 16)?;
    println!("{} entries; most frequent words first:", vocab.len());
    for id in 5..vocab.len() as u32 {
        print!(" {}", vocab.token(id).unwrap());
    }
    println!();

    let text = "The zebra sat on the mat!";
    println!("words   {:?}", split_words(text));
    let ids = vocab.encode(text);
    println!("ids     {ids:?} ({} unknown)", ids.iter().filter(|&&i| i == UNK).count());
    println!("decoded {:?}", vocab.decode(&ids)?);

    let path = std::env::temp_dir().join("layerexit-vocab.txt");
    vocab.save(&path)?;
    assert_eq!(Vocabulary::load(&path)?, vocab);
    println!("saved and reloaded {}", path.display());
    Ok(())
}
