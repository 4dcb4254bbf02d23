//! Shared setup for the benchmarks: a small trained-shape model over a
//! synthetic corpus at working dimensions.

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

use hopgen::corpus::{build_vocab, generate_synthetic, Vocab};
use hopgen::encoder::EncoderHp;
use hopgen::entgraph::Lexicon;
use hopgen::harness::{init_model, prepare, Config, PreparedExample};
use hopgen::num::ParamStore;

pub struct BenchSetup {
    pub store: ParamStore,
    pub hp: EncoderHp,
    pub vocab: Vocab,
    pub examples: Vec<PreparedExample>,
    pub config: Config,
}

/// Model at `hidden_dim` with `count` prepared synthetic examples.
pub fn setup(hidden_dim: usize, count: usize) -> BenchSetup {
    let ds = generate_synthetic(9, count, 30).expect("synthetic corpus");
    let lexicon = Lexicon::new(ds.lexicon_tokens());
    let vocab = build_vocab(&ds, 2000).expect("vocab");

    let mut config = Config::default();
    config.embed_dim = 32;
    config.tag_dim = 16;
    config.hidden_dim = hidden_dim;
    let hp = config.encoder_hp(vocab.len());

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    init_model(&mut store, &hp, &mut rng).expect("init model");

    let examples = ds
        .examples
        .iter()
        .map(|ex| prepare(ex, &vocab, &lexicon, &config).expect("prepare"))
        .collect();

    BenchSetup {
        store,
        hp,
        vocab,
        examples,
        config,
    }
}
