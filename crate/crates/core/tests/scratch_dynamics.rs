// Scratch: degenerate-regime and sweep-shape checks at final defaults.
// Deleted before finalizing.

use cmr_core::corpus::{generate_corpus, CorpusConfig};
use cmr_core::encoder::EncoderConfig;
use cmr_core::evaluator::{threshold_sweep, EvalMode};
use cmr_core::loss::LossKind;
use cmr_core::trainer::{train, TrainConfig};

#[test]
#[ignore]
fn degenerate_scan() {
    for sigma in [0.3] {
        for train_n in [192usize, 256, 384] {
            eprintln!("--- sigma={sigma} train={train_n}");
            degenerate_one(sigma, train_n);
        }
    }
}

fn degenerate_one(sigma: f64, train_n: usize) {
    let config = CorpusConfig {
        duplicate_rate: 1.0,
        noise_sigma: sigma,
        train_samples: train_n,
        test_samples: 16,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&config, 7).unwrap();
    let encoder = EncoderConfig::defaults_for(
        corpus.manifest.config.feature_dim,
        corpus.manifest.vocab_size,
    );
    let mut rho0_ok = 0;
    let mut rho5_ok = 0;
    for seed in 0..5u64 {
        let mut cfg = TrainConfig::defaults_for(encoder.clone());
        cfg.loss = LossKind::DropTriple;
        cfg.total_epochs = 8;
        cfg.warmup_epochs = 0;
        cfg.seed = seed;
        let state = train(cfg, &corpus).unwrap();
        let row0 = &state.history[0];
        let expect_empty = 2 * train_n;
        if row0.mean_loss == 0.0 && row0.empty_negset_anchors == expect_empty {
            rho0_ok += 1;
        }

        let mut cfg = TrainConfig::defaults_for(encoder.clone());
        cfg.loss = LossKind::DropTriple;
        cfg.total_epochs = 8;
        cfg.warmup_epochs = 5;
        cfg.seed = seed;
        let state = train(cfg, &corpus).unwrap();
        let row5 = &state.history[5];
        if row5.mean_loss > 0.0 {
            rho5_ok += 1;
        }
    }
    eprintln!("rho0 zero-loss: {rho0_ok}/5, rho5 recovery: {rho5_ok}/5");
}

#[test]
#[ignore]
fn sweep_shape() {
    let corpus = generate_corpus(
        &CorpusConfig {
            duplicate_rate: 0.0,
            ..CorpusConfig::default()
        },
        42,
    )
    .unwrap();
    let encoder = EncoderConfig::defaults_for(
        corpus.manifest.config.feature_dim,
        corpus.manifest.vocab_size,
    );
    let grid = [
        (0.2, 0.2),
        (0.2, 0.9),
        (0.7, 0.2),
        (0.7, 0.9),
        (1.0, 0.9),
        (0.7, 1.0),
        (0.2, 1.0),
        (1.0, 0.2),
        (1.0, 1.0),
    ];
    let mut ok = 0;
    for seed in 0..5u64 {
        let mut cfg = TrainConfig::defaults_for(encoder.clone());
        cfg.seed = seed;
        let rows = threshold_sweep(&cfg, &corpus, &grid, EvalMode::Semantic).unwrap();
        let low = rows
            .iter()
            .find(|r| r.delta_hetero == 0.2 && r.delta_homo == 0.2)
            .unwrap();
        let mh = rows.iter().find(|r| r.mh_equivalent).unwrap();
        let pass = low.r_sum <= mh.r_sum + 2.0;
        if pass {
            ok += 1;
        }
        eprintln!(
            "seed {seed}: low(0.2,0.2)={:.1} mh(1,1)={:.1} pass={pass}; all: {:?}",
            low.r_sum,
            mh.r_sum,
            rows.iter().map(|r| (r.delta_hetero, r.delta_homo, (r.r_sum * 10.0).round() / 10.0)).collect::<Vec<_>>()
        );
    }
    eprintln!("sweep shape: {ok}/5");
}
