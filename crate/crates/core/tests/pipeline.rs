use condeepmod::autodiff::ParamStore;
use condeepmod::dsp::{frame, speaker_bank, synth_mixture, synth_utterance, SpeakerSpec};
use condeepmod::encoder::{pretrain, EncoderConfig, PretrainConfig, SpeakerFrames};
use condeepmod::eval::{match_and_score_waveforms, oracle_frame_labels, cluster_purity};
use condeepmod::head::{train_head, HeadMode};
use condeepmod::pipeline::{head_sample, mixture_graph, separate, separate_with_head, Method, SeparatorConfig};

fn trained_encoder(bank: &[SpeakerSpec]) -> (EncoderConfig, ParamStore) {
    let enc = EncoderConfig::with_base_filters(4);
    let corpus: Vec<SpeakerFrames> = bank
        .iter()
        .map(|s| SpeakerFrames {
            speaker_id: s.speaker_id,
            frames: frame(&synth_utterance(s, 2.0, 1).unwrap(), 256, 64).unwrap(),
        })
        .collect();
    let cfg = PretrainConfig {
        steps: 120,
        batch_size: 32,
        seed: 4,
        ..PretrainConfig::default()
    };
    (enc.clone(), pretrain(&corpus, &enc, &cfg).unwrap().store)
}

fn separator(method: Method) -> SeparatorConfig {
    SeparatorConfig {
        theta: 0.7,
        method,
        ..SeparatorConfig::default()
    }
}

#[test]
fn separation_is_consistent_and_deterministic() {
    let bank = speaker_bank(4, 2).unwrap();
    let (enc, params) = trained_encoder(&bank);
    let rec = synth_mixture(&bank[..2], 2.0, 0.25, (0.0, 5.0), 31).unwrap();
    let cfg = separator(Method::ContrastiveMlp);
    let sep = separate(&rec.mixture, &enc, &params, &cfg, 5).unwrap();

    let n = sep.mixture_graph.frames.n_frames();
    for t in 0..n {
        assert_eq!(sep.masks.masks().iter().filter(|m| m[t]).count(), 1);
    }
    assert!(sep.reconstruction_error <= 1e-12);
    assert_eq!(sep.estimates.len(), sep.k_eff());
    assert!(sep.estimates.iter().all(|e| e.len() == rec.mixture.len()));

    let covered = sep.mixture_graph.frames.covered_len();
    let score = match_and_score_waveforms(&sep.estimates, &rec.sources, &rec.mixture, covered).unwrap();
    assert!(score.si_snri_db > 0.0, "SI-SNRi {}", score.si_snri_db);
    let oracle = oracle_frame_labels(&rec.sources, 256, 64).unwrap();
    assert!(cluster_purity(sep.hardened.partition.labels(), &oracle).unwrap() >= 0.5);

    let again = separate(&rec.mixture, &enc, &params, &cfg, 5).unwrap();
    assert_eq!(again.head_trace, sep.head_trace);
    assert_eq!(again.hardened, sep.hardened);
    for (a, b) in again.estimates.iter().zip(&sep.estimates) {
        assert_eq!(a.samples(), b.samples());
    }
}

#[test]
fn gcn_baseline_runs_on_the_same_graph() {
    let bank = speaker_bank(4, 2).unwrap();
    let (enc, params) = trained_encoder(&bank);
    let rec = synth_mixture(&bank[1..3], 1.5, 0.25, (0.0, 5.0), 32).unwrap();
    let mut cfg = separator(Method::GcnMlp);
    cfg.head.hidden = 64;
    let sep = separate(&rec.mixture, &enc, &params, &cfg, 6).unwrap();
    assert!(sep.reconstruction_error <= 1e-12);
    let con = mixture_graph(&rec.mixture, &enc, &params, &separator(Method::ContrastiveMlp)).unwrap();
    assert_eq!(con.graph.edges(), sep.mixture_graph.graph.edges());
}

#[test]
fn amortized_head_separates_unseen_mixtures() {
    let bank = speaker_bank(4, 2).unwrap();
    let (enc, params) = trained_encoder(&bank);
    let mut cfg = separator(Method::ContrastiveMlp);
    cfg.head.mode = HeadMode::Amortized;
    let samples: Vec<_> = (0..2)
        .map(|i| {
            let rec = synth_mixture(&bank[i..i + 2], 1.5, 0.25, (0.0, 5.0), 40 + i as u64).unwrap();
            head_sample(&mixture_graph(&rec.mixture, &enc, &params, &cfg).unwrap(), cfg.method).unwrap()
        })
        .collect();
    let head = train_head(&samples, &cfg.head, 2).unwrap();
    let rec = synth_mixture(&bank[2..4], 1.5, 0.25, (0.0, 5.0), 50).unwrap();
    let sep = separate_with_head(&rec.mixture, &enc, &params, &head.store, &cfg).unwrap();
    assert!(sep.head_trace.is_empty());
    assert!(sep.reconstruction_error <= 1e-12);
    assert!(sep.k_eff() >= 1);
}

#[test]
fn mismatched_frame_length_is_rejected() {
    let bank = speaker_bank(2, 2).unwrap();
    let enc = EncoderConfig::with_base_filters(4);
    let params = condeepmod::encoder::init_encoder(&enc, 1).unwrap();
    let rec = synth_mixture(&bank, 1.0, 0.25, (0.0, 0.0), 3).unwrap();
    let cfg = SeparatorConfig {
        frame_len: 128,
        hop: 32,
        ..SeparatorConfig::default()
    };
    assert!(separate(&rec.mixture, &enc, &params, &cfg, 1).is_err());
}
