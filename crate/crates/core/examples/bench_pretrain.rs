use pcmp_core::data::{PairStream, WorldConfig, TaskConfig, generate_task};
use pcmp_core::encoder::{contrastive_pretrain, retrieval_accuracy, zero_shot_classifier, predict, argmax, EncoderConfig, PretrainConfig};

fn main() {
    let cfg = EncoderConfig::default();
    let world = WorldConfig::for_vocab(cfg.vocab_size, cfg.image_dim);
    let sigma = 0.15;
    for seed in [1u64, 2, 3, 42] {
        let stream = PairStream::new(world.clone(), sigma, 256);
        let train = PretrainConfig { epochs: 100, batch_size: 32, lr: 3e-3 };
        let pair = contrastive_pretrain(&cfg, &stream, &train, seed).unwrap();
        let r = retrieval_accuracy(&pair, 32, sigma, 0).unwrap();
        let mut zs_accs = vec![];
        for tseed in [101u64, 102, 103] {
            let task = generate_task(&TaskConfig { seed: tseed, ..TaskConfig::default() }, &world).unwrap();
            let w = zero_shot_classifier(&pair, &task.class_tokens, &world.template).unwrap();
            let feats = pair.image.features(&task.test.iter().map(|s| s.x.clone()).collect::<Vec<_>>()).unwrap();
            let mut correct = 0;
            for (i, s) in task.test.iter().enumerate() {
                let f = pcmp_core::Tensor::new(vec![feats.cols()], feats.row(i).to_vec()).unwrap();
                let p = predict(&pair, &w, &f).unwrap();
                if argmax(p.data()) == s.y { correct += 1; }
            }
            zs_accs.push(100.0 * correct as f64 / task.test.len() as f64);
        }
        eprintln!("seed={seed}: retrieval {r:.3}, zs {:?}", zs_accs.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>());
    }
}
