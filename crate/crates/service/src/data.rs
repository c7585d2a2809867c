//! Corpus loading and the train/val/test split.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refinpaint_core::corpus::{build_manifest, generate_toy_corpus, split_by_hash, CorpusError, Split};
use refinpaint_core::midi::write_smf;
use refinpaint_core::remi::{encode, TokenSeq};

use crate::config::CorpusSpec;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<TokenSeq>,
    pub val: Vec<TokenSeq>,
    pub test: Vec<TokenSeq>,
}

impl Splits {
    fn push(&mut self, split: Split, seq: TokenSeq) {
        match split {
            Split::Train => self.train.push(seq),
            Split::Val => self.val.push(seq),
            Split::Test => self.test.push(seq),
        }
    }
}

/// Toy pieces are split by the hash of their written MIDI bytes, exactly
/// like files on disk.
pub fn toy_splits(pieces: usize, seed: u64) -> Splits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Splits::default();
    for score in generate_toy_corpus(pieces, &mut rng) {
        splits.push(split_by_hash(&write_smf(&score)), encode(&score));
    }
    splits
}

pub fn load(spec: &CorpusSpec) -> Result<Splits, CorpusError> {
    match &spec.dir {
        None => Ok(toy_splits(spec.toy, spec.seed)),
        Some(dir) => {
            let mut splits = Splits::default();
            for (record, seq) in build_manifest(dir)? {
                splits.push(record.split, seq);
            }
            Ok(splits)
        }
    }
}
