//! Score generated text against references.
//!
//!     cargo run --example metrics

use layerexit::metrics::{distinct_n, rouge_l, rouge_n, score_pair, summarize};
use layerexit::tokenizer::split_words;

fn main() {
    let references = [
        "alice flew from paris to rome .",
        "we bought an apple , a kite and an owl .",
        "bob likes a hat .",
    ];
    let hypotheses = [
        "alice flew from paris to rome .",
        "we bought a apple , a kite and an owl .",
        "bob likes likes hat .",
    ];
    let hyp: Vec<Vec<String>> = hypotheses.iter().map(|s| split_words(s)).collect();
    let refs: Vec<Vec<String>> = references.iter().map(|s| split_words(s)).collect();

    for (h, r) in hyp.iter().zip(&refs) {
        let s = score_pair(h, r);
        println!(
            "{:<42} rouge-1 {:.3}  rouge-l {:.3}  bleu-4 {:.3}  meteor {:.3}",
            h.join(" "),
            s.rouge_1,
            s.rouge_l,
            s.bleu_4,
            s.meteor
        );
    }
    let r2 = rouge_n(&hyp[1], &refs[1], 2);
    let rl = rouge_l(&hyp[2], &refs[2]);
    println!("bigram overlap p/r = {:.3}/{:.3}; LCS p/r = {:.3}/{:.3}", r2.precision, r2.recall, rl.precision, rl.recall);
    println!("distinct-1 {:.3}, distinct-2 {:.3}", distinct_n(&hyp, 1), distinct_n(&hyp, 2));

    let pairs: Vec<(&[String], &[String])> = hyp.iter().zip(&refs).map(|(h, r)| (&h[..], &r[..])).collect();
    for (name, value) in summarize(&pairs) {
        println!("{name:<15} {value:.4}");
    }
}
