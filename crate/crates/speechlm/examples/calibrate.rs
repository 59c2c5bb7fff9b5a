//! Temporary calibration harness for desk-scale hyperparameters.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use speechlm::decode::greedy_decode;
use speechlm::encoder::{CombinerMode, EncoderConfig};
use speechlm::lm::{LmConfig, LoraConfig};
use speechlm::metrics::wer_str;
use speechlm::model::{ModelConfig, MultimodalModel};
use speechlm::tasks::{generate_suite, TaskGenConfig, TaskSample};
use speechlm::trainer::{run, TaskRegistry, TrainConfig};

fn train_wer(model: &MultimodalModel, suite_vocab: &speechlm::vocab::TokenVocab, samples: &[TaskSample], n: usize) -> f64 {
    let mut edits = 0.0;
    let mut words = 0.0;
    for s in samples.iter().take(n) {
        let out = greedy_decode(model, Some(&s.audio), &s.prompt_ids, 24).unwrap();
        let hyp = suite_vocab.detokenize(&out);
        let w = wer_str(&s.label_text, &hyp).unwrap();
        edits += w * s.label_text.split_whitespace().count() as f64;
        words += s.label_text.split_whitespace().count() as f64;
    }
    edits / words
}

fn main() {
    let t0 = Instant::now();
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1600);
    let rank: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(16);

    let gen_cfg = TaskGenConfig {
        tasks: vec!["asr".into()],
        train_per_task: 256,
        valid_per_task: 16,
        test_per_task: 16,
        seed: 11,
        ..TaskGenConfig::default()
    };
    let suite = generate_suite(&gen_cfg).unwrap();
    println!("vocab size: {}", suite.vocab.size());

    let model_cfg = ModelConfig {
        encoder: EncoderConfig::default(),
        lm: LmConfig {
            vocab_size: suite.vocab.size(),
            ..LmConfig::default()
        },
        combiner: CombinerMode::Weighted,
        lora: LoraConfig {
            rank,
            alpha: rank as f64,
        },
    };
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut model = MultimodalModel::new(model_cfg, &mut rng).unwrap();
    println!(
        "params: {} total, trainable stage1: {}",
        model.params.len(),
        model.params.trainable_numel()
    );

    let train_cfg = TrainConfig {
        peak_lr: lr,
        stage1_steps: 300,
        stage2_warmup_steps: 100,
        stage2_steps: steps,
        seed: 5,
        ..TrainConfig::default()
    };
    let asr = suite.task("asr").unwrap();
    let registry = TaskRegistry::new(
        vec![("asr".into(), 1.0, asr.train.clone())],
        &train_cfg,
    )
    .unwrap();

    let outcome = run(&mut model, &registry, &train_cfg).unwrap();
    let train_losses: Vec<f64> = outcome
        .history
        .iter()
        .filter(|r| r.split == "train")
        .map(|r| r.loss)
        .collect();
    for (i, chunk) in train_losses.chunks(200).enumerate() {
        let mean: f64 = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("steps {:4}-{:4}: mean train loss {:.4}", i * 200, i * 200 + chunk.len(), mean);
    }
    println!("best valid loss: {:.4}", outcome.best_valid_loss);
    println!("elapsed train: {:.1}s", t0.elapsed().as_secs_f64());

    let w = train_wer(&model, &suite.vocab, &registry.tasks[0].train, 64);
    println!("train WER over 64 samples: {:.4}", w);
    println!("total elapsed: {:.1}s", t0.elapsed().as_secs_f64());
}
