use condeepmod::dsp::{frame, speaker_bank, synth_utterance};
use condeepmod::encoder::{encode, pretrain, EncoderConfig, PretrainConfig, SpeakerFrames};

fn corpus(speakers: usize, seed: u64) -> Vec<SpeakerFrames> {
    speaker_bank(speakers, 5)
        .unwrap()
        .iter()
        .map(|s| SpeakerFrames {
            speaker_id: s.speaker_id,
            frames: frame(&synth_utterance(s, 1.5, seed).unwrap(), 256, 64).unwrap(),
        })
        .collect()
}

fn config(steps: usize) -> PretrainConfig {
    PretrainConfig {
        steps,
        batch_size: 32,
        seed: 9,
        ..PretrainConfig::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn training_separates_speakers() {
    let enc = EncoderConfig::with_base_filters(4);
    let out = pretrain(&corpus(4, 1), &enc, &config(60)).unwrap();
    let losses: Vec<f64> = out.trace.iter().map(|r| r.loss).collect();
    let ceiling = (32.0f64 - 1.0).ln();
    assert!((mean(&losses[..5]) - ceiling).abs() < 0.5, "early loss {}", mean(&losses[..5]));
    assert!(mean(&losses[50..]) < mean(&losses[..10]) - 0.3);

    // Held-out utterances of the same voices.
    let held = corpus(4, 2);
    let embedded: Vec<_> = held.iter().map(|s| encode(&enc, &out.store, &s.frames).unwrap()).collect();
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for (a, ea) in embedded.iter().enumerate() {
        for (b, eb) in embedded.iter().enumerate() {
            for i in (0..ea.n()).step_by(5) {
                for j in (0..eb.n()).step_by(5) {
                    if a == b && i == j {
                        continue;
                    }
                    let sim: f64 = ea.row(i).iter().zip(eb.row(j)).map(|(x, y)| x * y).sum();
                    if a == b { intra.push(sim) } else { inter.push(sim) }
                }
            }
        }
    }
    assert!(mean(&intra) - mean(&inter) >= 0.2, "intra {} inter {}", mean(&intra), mean(&inter));
}

#[test]
fn same_seed_gives_identical_parameters() {
    let enc = EncoderConfig::with_base_filters(4);
    let c = corpus(3, 1);
    let a = pretrain(&c, &enc, &config(4)).unwrap();
    let b = pretrain(&c, &enc, &config(4)).unwrap();
    assert_eq!(a.trace, b.trace);
    let mut bytes_a = Vec::new();
    let mut bytes_b = Vec::new();
    a.store.write_checkpoint(&mut bytes_a).unwrap();
    b.store.write_checkpoint(&mut bytes_b).unwrap();
    assert_eq!(bytes_a, bytes_b);
}
