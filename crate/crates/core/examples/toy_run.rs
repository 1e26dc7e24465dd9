//! Trains the toy preset on the default synthetic corpus and prints the
//! per-epoch trail and final test recalls.
//!
//! `cargo run --release -p scan-core --example toy_run [preset]`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scan_core::dataio::{generate_synthetic, split, Dataset, SplitCounts, SyntheticSpec};
use scan_core::encoders::{ModelDims, ModelParams};
use scan_core::eval::{format_table, score_dataset, EvalReport};
use scan_core::presets::preset;
use scan_core::train::train;

fn main() -> scan_core::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "toy".into());
    let p = preset(&name)?;
    let spec = SyntheticSpec::default();
    let data = generate_synthetic(&spec)?;
    let parts = split(&data.corpus, SplitCounts { train: 100, val: 25, test: 25 }, spec.seed)?;
    let tr = Dataset::from_corpus(&parts.train, &data.vocab)?;
    let va = Dataset::from_corpus(&parts.val, &data.vocab)?;
    let te = Dataset::from_corpus(&parts.test, &data.vocab)?;
    let dims = ModelDims {
        raw_dim: spec.raw_dim,
        embed_dim: p.model.embed_dim,
        hidden_dim: p.model.hidden_dim,
        vocab_size: data.vocab.len(),
    };
    let init = ModelParams::init(dims, &mut ChaCha8Rng::seed_from_u64(spec.seed))?;
    let start = std::time::Instant::now();
    let out = train(&tr, Some(&va), init, p.model.encoder, &p.scorer, &p.train, spec.seed, false, &mut |m, _| {
        let v = m.val.as_ref().unwrap();
        println!(
            "epoch {:2} lr {:.5} loss {:.4} val i2t R@1 {:.1} t2i R@1 {:.1} rsum {:.1} ({:.1}s)",
            m.epoch,
            m.lr,
            m.train_loss,
            v.sentence_retrieval.r1,
            v.image_retrieval.r1,
            v.rsum,
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    let report = EvalReport::compute(&score_dataset(&te, &out.best, p.model.encoder, &p.scorer, false)?)?;
    print!("{}", format_table(&[(p.scorer.describe(), report)]));
    println!("best epoch {}", out.best_epoch);
    Ok(())
}
