// Scratch experiment probe for sizing acceptance budgets.
use std::time::Instant;

use kvcomp::adapters::init_adapters;
use kvcomp::compressor::{compress, regenerate_counted, CompressVariant};
use kvcomp::data::{build_split_corpora, tokenize};
use kvcomp::metrics::{bleu, rouge_l_f};
use kvcomp::model::{ModelConfig, ModelParams};
use kvcomp::training::{
    run_training, train_base_lm, BaseTrainConfig, TrainConfig, TrainSet, TrainVariant,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let base_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let comp_steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(900);
    let comp_lr: f32 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let cfg = ModelConfig::small();
    let mut params = ModelParams::random(&cfg, 0).unwrap();
    let (train, dev, test) = build_split_corpora(2000, 32, 24, &[96], 7).unwrap();
    let train_tokens: Vec<Vec<u32>> = train.iter().map(|r| tokenize(&r.text)).collect();
    let dev_tokens: Vec<Vec<u32>> = dev.iter().map(|r| tokenize(&r.text)).collect();
    let test_tokens: Vec<Vec<u32>> = test.iter().map(|r| tokenize(&r.text)).collect();

    let t0 = Instant::now();
    let base_cfg = BaseTrainConfig {
        total_steps: base_steps,
        warmup_steps: 100,
        peak_lr: 1e-3,
        batch_size: 4,
        seed: 0,
        eval_every: 500,
        ..BaseTrainConfig::default()
    };
    let trace = train_base_lm(&mut params, &train_tokens, Some(&dev_tokens), &base_cfg).unwrap();
    println!(
        "base LM {} steps in {:.0}s: train loss {:.3} -> {:.3}, dev {:?}",
        base_steps,
        t0.elapsed().as_secs_f64(),
        trace.first().unwrap().loss,
        trace.iter().filter(|r| r.split == kvcomp::data::Split::Train).last().unwrap().loss,
        trace
            .iter()
            .filter(|r| r.split == kvcomp::data::Split::Dev)
            .map(|r| (r.step, (r.loss * 1000.0).round() / 1000.0))
            .collect::<Vec<_>>()
    );

    for variant in [TrainVariant::Kv, TrainVariant::Embed] {
        for k in [16usize, 4, 1] {
            let t0 = Instant::now();
            let adapters = init_adapters(&cfg, 8, 16.0, 100 + k as u64, variant == TrainVariant::Embed).unwrap();
            let mut tc = TrainConfig::pretrain(k);
            tc.total_steps = comp_steps;
            tc.warmup_steps = 100;
            tc.peak_lr = comp_lr;
            tc.variant = variant;
            tc.seed = 11;
            let set = TrainSet::Pretrain(train_tokens.clone());
            let (adapters, trace) = run_training(&params, adapters, &set, None, &tc).unwrap();
            let train_time = t0.elapsed().as_secs_f64();

            let cv = match variant {
                TrainVariant::Kv => CompressVariant::Kv,
                _ => CompressVariant::Embed,
            };
            let mut rouges = Vec::new();
            let mut bleus = Vec::new();
            for text in &test_tokens {
                let ctx = compress(&params, &adapters, text, k, cv).unwrap();
                let (out, _) = regenerate_counted(
                    &params,
                    &ctx,
                    adapters.regen_trigger.as_ref(),
                    text.len() + 40,
                )
                .unwrap();
                rouges.push(rouge_l_f(&out, text).unwrap());
                bleus.push(bleu(&out, text, 4).unwrap());
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            println!(
                "{:?} k={k}: {comp_steps} steps lr {comp_lr} in {train_time:.0}s, final loss {:.3}, test ROUGE {:.3} BLEU {:.3}",
                variant,
                trace.last().unwrap().loss,
                mean(&rouges),
                mean(&bleus)
            );
        }
    }
}
