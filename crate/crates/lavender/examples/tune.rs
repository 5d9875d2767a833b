// Scratch harness for picking training defaults. Not part of the artifact.

use std::time::Instant;

use lavender::agg::{aggregate, AggMode};
use lavender::teacher::{build_vocab, make_dataset_from_combos, split_combo_keys, DEFAULT_SIGMA};
use lavender::tensor::Graph;
use lavender::train::{train, Pipeline, TrainConfig};
use lavender::vlm::{exact_match_accuracy, SamplePair, ToyVlm, VlmConfig};

/// Mean host-attention mass on the queried patch (mean-mean aggregation),
/// over a sample subset. 1/16 would be uniform.
fn host_attention_quality(pipe: &Pipeline, samples: &[SamplePair]) -> f64 {
    let model = pipe.effective_model().unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let mut total = 0.0;
    for s in samples {
        let fp = model.forward(&mut g, &bound, s).unwrap();
        let agg = aggregate(
            &mut g,
            AggMode::parse("mean-mean").unwrap(),
            &fp.record,
            &fp.hidden,
            None,
            &[],
        )
        .unwrap();
        let row = s.question.len(); // first label token position
        total += g.value(agg).at2(row, s.queried_cell);
    }
    total / samples.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: Vec<u64> = if args.len() > 1 {
        args[1].split(',').map(|s| s.parse().unwrap()).collect()
    } else {
        vec![1]
    };
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3e-4);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(30);
    let agg = AggMode::parse(args.get(4).map(|s| s.as_str()).unwrap_or("learn")).unwrap();
    let pretrain_override: Option<usize> = args.get(5).map(|s| s.parse().unwrap());
    let batch: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(16);

    let vocab = build_vocab(4, 4);
    let (train_keys, test_keys) = split_combo_keys(4, 4, 0.2, 7);
    let data = make_dataset_from_combos(500, 4, 4, &vocab, 11, &train_keys, DEFAULT_SIGMA, "tr").unwrap();
    let test = make_dataset_from_combos(200, 4, 4, &vocab, 12, &test_keys, DEFAULT_SIGMA, "te").unwrap();
    let test_samples: Vec<SamplePair> = test.iter().map(|(s, _)| s.clone()).collect();
    let probe: Vec<SamplePair> = test_samples[..50].to_vec();

    for &seed in &seeds {
        for (name, lambda, pretrain) in [
            ("lavender", 0.5, pretrain_override.unwrap_or(epochs.div_ceil(3))),
            ("baseline ", 0.0, 0),
        ] {
            let cfg = TrainConfig {
                lambda,
                lr,
                epochs,
                pretrain_epochs: pretrain,
                agg_mode: agg,
                batch,
                seed,
                eval_every_epoch: true,
                ..Default::default()
            };
            let vcfg = VlmConfig::toy_cross(vocab.len(), 4, 4, 8);
            let model = ToyVlm::new(vcfg, seed).unwrap();
            let mut pipe = Pipeline::new(model, &cfg).unwrap();
            let t0 = Instant::now();
            let log = train(&mut pipe, &data, Some(&test_samples), &vocab, &cfg).unwrap();
            let acc = exact_match_accuracy(&pipe.effective_model().unwrap(), &test_samples).unwrap();
            let hq = host_attention_quality(&pipe, &probe);
            let curve: Vec<String> = log
                .epochs
                .iter()
                .map(|e| format!("{:.0}", e.eval_accuracy.unwrap_or(0.0) * 100.0))
                .collect();
            let last = log.steps.last().unwrap();
            println!(
                "{name} seed={seed} lr={lr} agg={} pt={pretrain}: test={acc:.3} hostq={hq:.3} l_vlm={:.3} l_att={:?} [{:.0}s]\n  curve: {}",
                agg.name(),
                last.l_vlm,
                last.l_att.map(|v| (v * 1000.0).round() / 1000.0),
                t0.elapsed().as_secs_f64(),
                curve.join(" ")
            );
        }
    }
}
