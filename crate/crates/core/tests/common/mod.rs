#![allow(dead_code)]

use std::sync::OnceLock;

use pqmotion::config::Config;
use pqmotion::experiment::{corpus_for, train_all, Splits, Trained};
use pqmotion::numerics::NormKind;

/// Models small enough to train in a few seconds.
pub fn tiny_config() -> Config {
    let mut cfg = Config::desk();
    cfg.corpus.num_sequences = 40;
    cfg.corpus.frames = 32;
    cfg.pqvae.groups = 2;
    cfg.pqvae.codes = 8;
    cfg.pqvae.code_dim = 4;
    cfg.pqvae.hidden = 16;
    cfg.pqvae.norm = NormKind::Layer;
    cfg.pqvae.epochs = 2;
    cfg.pqvae.batch_size = 4;
    cfg.predictor.d_model = 16;
    cfg.predictor.heads = 2;
    cfg.predictor.blocks = 1;
    cfg.predictor.identity_dim = 4;
    cfg.predictor.context_width = 8;
    cfg.predictor.context_layers = 1;
    cfg.predictor.epochs = 2;
    cfg.predictor.batch_size = 8;
    cfg.predictor.schedule.iterations = 4;
    cfg.refiner.d_model = 16;
    cfg.refiner.heads = 2;
    cfg.refiner.blocks = 1;
    cfg.refiner.identity_dim = 4;
    cfg.refiner.epochs = 2;
    cfg.refiner.batch_size = 8;
    cfg
}

pub struct TinyRun {
    pub cfg: Config,
    pub splits: Splits,
    pub trained: Trained,
}

/// One trained tiny run shared by every test in a binary.
pub fn tiny_run() -> &'static TinyRun {
    static RUN: OnceLock<TinyRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = tiny_config();
        let (_, splits) = corpus_for(&cfg, 3).expect("corpus");
        let trained = train_all(&cfg, &splits, 3, None).expect("training");
        TinyRun { cfg, splits, trained }
    })
}
