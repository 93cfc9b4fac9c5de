//! Write a synthetic GAP-format corpus and its vocabulary.
//!
//! `cargo run --example synth_corpus -- <count> <seed> <out.tsv> <vocab.txt>`

use gapcoref::data::write_gap_tsv;
use gapcoref::synthetic::{generate, vocab_for_records};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() != 4 {
        eprintln!("usage: synth_corpus <count> <seed> <out.tsv> <vocab.txt>");
        std::process::exit(2);
    }
    let count: usize = args[0].parse().expect("count must be an integer");
    let seed: u64 = args[1].parse().expect("seed must be an integer");
    let records = generate(count, seed);
    std::fs::write(&args[2], write_gap_tsv(&records)).expect("write corpus");
    std::fs::write(&args[3], vocab_for_records(&records).to_text()).expect("write vocab");
}
