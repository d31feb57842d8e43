//! Pipeline stages. Every stage reads its inputs from the work directory,
//! writes its outputs there, and derives all randomness from the root seed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use condeepmod::autodiff::ParamStore;
use condeepmod::dsp::{
    frame, read_wav, speaker_bank, synth_mixture, synth_utterance, write_wav, ActivityInterval, SpeakerSpec, Waveform,
};
use condeepmod::encoder::{
    contrastive_loss_value, encode, encode_tensor, init_encoder, pretrain_with, sample_pairs, write_trace_csv,
    EncoderConfig, SpeakerFrames,
};
use condeepmod::eval::{
    cluster_purity, match_and_score, match_and_score_waveforms, oracle_frame_labels, si_snr, spearman,
};
use condeepmod::graph::{build_graph, partition_scores, Partition, SimilarityGraph};
use condeepmod::head::{assign, dmon_terms, train_head, HeadMode, HeadSample};
use condeepmod::pipeline::{finish_separation, head_sample, separate, MixtureGraph};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

/// Estimates must sum back to the mixture to this precision.
pub const RECONSTRUCTION_TOLERANCE: f64 = 1e-12;
/// Rescaling an estimate may move its SI-SNR by at most this much.
pub const SCALE_INVARIANCE_TOLERANCE_DB: f64 = 1e-9;
/// Pairs drawn for the fixed batch that scores each checkpoint's loss.
const TREND_BATCH: usize = 128;
const MIN_TREND_CHECKPOINTS: usize = 3;
const SDR_NOTE: &str = "sdr: plain SNR form 10*log10(|s|^2/|s_hat-s|^2), no projection filters";

/// Seed streams, one per kind of random draw.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Speakers = 1,
    Utterance = 2,
    MixtureSpeakers = 3,
    Mixture = 4,
    Pretrain = 5,
    Head = 6,
    TrendBatch = 7,
}

/// Deterministic sub-seed for draw `index` of `stream` under `root`.
fn derive_seed(root: u64, stream: Stream, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream as u64);
    rng.set_word_pos(2 * index as u128);
    rng.next_u64()
}

/// Paths of every artifact under the work directory.
pub struct Workdir {
    root: PathBuf,
    config: PipelineConfig,
}

impl Workdir {
    pub fn new(root: &Path, config: PipelineConfig) -> Self {
        Self {
            root: root.to_path_buf(),
            config,
        }
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn corpus(&self) -> PathBuf {
        self.dir(&self.config.paths.corpus)
    }

    fn mixtures(&self) -> PathBuf {
        self.dir(&self.config.paths.mixtures)
    }

    fn checkpoints(&self) -> PathBuf {
        self.dir(&self.config.paths.checkpoints)
    }

    fn graphs(&self) -> PathBuf {
        self.dir(&self.config.paths.graphs)
    }

    fn heads(&self) -> PathBuf {
        self.dir(&self.config.paths.heads)
    }

    fn outputs(&self) -> PathBuf {
        self.dir(&self.config.paths.outputs)
    }

    fn reports(&self) -> PathBuf {
        self.dir(&self.config.paths.reports)
    }

    fn speakers_file(&self) -> PathBuf {
        self.corpus().join("speakers.json")
    }

    fn encoder_file(&self) -> PathBuf {
        self.checkpoints().join("encoder.cdm")
    }

    fn manifest_file(&self) -> PathBuf {
        self.checkpoints().join("manifest.json")
    }

    fn amortized_head(&self) -> PathBuf {
        self.heads().join("amortized.cdm")
    }
}

fn speaker_dir(id: u32) -> String {
    format!("spk{id:03}")
}

fn mix_id(index: usize) -> String {
    format!("mix{index:03}")
}

fn checkpoint_name(step: usize) -> String {
    format!("step{step:06}.cdm")
}

fn missing(stage: &str, path: &Path, detail: impl Into<String>) -> CliError {
    CliError::MissingInput {
        stage: stage.into(),
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

fn require(stage: &str, path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(missing(stage, path, format!("run `{producer}` first")))
    }
}

fn io(stage: &str) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Stage {
        stage: stage.into(),
        source: e.into(),
    }
}

/// Removes a stage's own output directory so stale files never survive a rerun.
fn fresh_dir(stage: &str, path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_dir_all(path).map_err(io(stage))?;
    }
    fs::create_dir_all(path).map_err(io(stage))
}

fn write_json<T: Serialize>(stage: &str, path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::stage(stage)(e.into()))?;
    text.push('\n');
    fs::write(path, text).map_err(io(stage))
}

fn read_json<T: DeserializeOwned>(stage: &str, path: &Path, producer: &str) -> Result<T> {
    require(stage, path, producer)?;
    let text = fs::read_to_string(path).map_err(io(stage))?;
    serde_json::from_str(&text).map_err(|e| CliError::stage(stage)(e.into()))
}

fn read_audio(stage: &str, path: &Path, producer: &str) -> Result<Waveform> {
    require(stage, path, producer)?;
    read_wav(path).map_err(CliError::stage(stage))
}

fn load_params(stage: &str, path: &Path, producer: &str) -> Result<ParamStore> {
    require(stage, path, producer)?;
    ParamStore::load(path).map_err(CliError::stage(stage))
}

/// Copy of the configuration a stage ran with, root seed included.
fn log_run(stage: &str, wd: &Workdir) -> Result<()> {
    let dir = wd.reports();
    fs::create_dir_all(&dir).map_err(io(stage))?;
    write_json(stage, &dir.join(format!("{stage}.config.json")), &wd.config)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeakerManifest {
    pub seed: u64,
    pub utterances: usize,
    pub speakers: Vec<SpeakerSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureMeta {
    pub seed: u64,
    pub mix_id: String,
    pub sample_rate: u32,
    pub samples: usize,
    pub speaker_ids: Vec<u32>,
    pub gains_db: Vec<f64>,
    /// Per source, the sample intervals in which it is active.
    pub activity: Vec<Vec<ActivityInterval>>,
    /// Fraction of frames in which two or more sources are active.
    pub overlap_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub step: usize,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainManifest {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub checkpoints: Vec<CheckpointEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphSummary {
    pub seed: u64,
    pub mix_id: String,
    pub theta: f64,
    pub n: usize,
    pub m: usize,
    /// Conductance ×100 of the oracle speaker partition on this graph.
    pub oracle_conductance: f64,
    /// Modularity ×100 of the oracle speaker partition on this graph.
    pub oracle_modularity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadSummary {
    pub seed: u64,
    pub head_seed: u64,
    pub mode: HeadMode,
    pub mixtures: Vec<String>,
    pub steps: usize,
    pub loss_final: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct SeparationResult {
    pub seed: u64,
    pub mix_id: String,
    pub k_eff: usize,
    /// Modularity loss of the head's soft assignments on this mixture.
    pub loss_final: f64,
    pub Q: f64,
    pub C: f64,
    pub reconstruction_error: f64,
    /// Cluster label of every frame.
    pub assignments: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct EvalRow {
    pub mix_id: String,
    pub k_eff: usize,
    pub si_snri: f64,
    pub sdri: f64,
    pub purity: f64,
    pub C: f64,
    pub Q: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvariantReport {
    pub max_reconstruction_error: f64,
    pub max_scale_deviation_db: f64,
    pub max_mixture_si_snri_abs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct EvalReport {
    pub seed: u64,
    pub note: String,
    pub mixtures: usize,
    pub mean_si_snri: f64,
    pub mean_sdri: f64,
    pub mean_purity: f64,
    pub mean_k_eff: f64,
    pub mean_C: f64,
    pub mean_Q: f64,
    pub invariants: InvariantReport,
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct TrendRow {
    pub step: usize,
    pub loss: f64,
    pub C: f64,
    pub Q: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendReport {
    pub seed: u64,
    pub theta: f64,
    pub mixtures: usize,
    pub rows: Vec<TrendRow>,
    /// Spearman correlation of loss with conductance; `None` if undefined.
    pub spearman_loss_conductance: Option<f64>,
    pub spearman_loss_modularity: Option<f64>,
}

/// Sorted mixture ids found under the mixture directory.
fn list_mixtures(stage: &str, wd: &Workdir) -> Result<Vec<String>> {
    let dir = wd.mixtures();
    require(stage, &dir, "synth")?;
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir).map_err(io(stage))? {
        let entry = entry.map_err(io(stage))?;
        if entry.path().join("meta.json").is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    if ids.is_empty() {
        return Err(missing(stage, &dir, "no mixtures; run `synth` first"));
    }
    ids.sort();
    Ok(ids)
}

fn load_sources(stage: &str, wd: &Workdir, id: &str, meta: &MixtureMeta) -> Result<Vec<Waveform>> {
    let dir = wd.mixtures().join(id);
    (0..meta.speaker_ids.len())
        .map(|c| read_audio(stage, &dir.join(format!("s{c}.wav")), "synth"))
        .collect()
}

fn load_encoder(stage: &str, wd: &Workdir) -> Result<(EncoderConfig, ParamStore)> {
    let manifest: PretrainManifest = read_json(stage, &wd.manifest_file(), "pretrain")?;
    let expected = wd.config.encoder_config();
    if manifest.encoder != expected {
        return Err(CliError::Usage(format!(
            "{stage}: the encoder section or frame_len changed since `pretrain`; rerun it"
        )));
    }
    let params = load_params(stage, &wd.encoder_file(), "pretrain")?;
    Ok((expected, params))
}

/// Frames, embeddings and the stored graph of one mixture.
fn stored_mixture_graph(
    stage: &str,
    wd: &Workdir,
    id: &str,
    encoder: &EncoderConfig,
    params: &ParamStore,
) -> Result<(Waveform, MixtureGraph)> {
    let mixture = read_audio(stage, &wd.mixtures().join(id).join("mixture.wav"), "synth")?;
    let graph_path = wd.graphs().join(format!("{id}.cdg"));
    require(stage, &graph_path, "build-graph")?;
    let graph = SimilarityGraph::load(&graph_path).map_err(CliError::stage(stage))?;
    let frames = frame(&mixture, wd.config.frame_len, wd.config.hop).map_err(CliError::stage(stage))?;
    let embeddings = encode(encoder, params, &frames).map_err(CliError::stage(stage))?;
    if graph.n() != frames.n_frames() {
        return Err(CliError::Usage(format!(
            "{stage}: graph of {id} has {} nodes for {} frames; rerun `build-graph`",
            graph.n(),
            frames.n_frames()
        )));
    }
    Ok((
        mixture,
        MixtureGraph {
            frames,
            embeddings,
            graph,
        },
    ))
}

/// One-line summary printed on stdout after a stage succeeds.
pub type Summary = serde_json::Value;

pub fn synth(wd: &Workdir) -> Result<Summary> {
    const STAGE: &str = "synth";
    let cfg = &wd.config;
    let seed = cfg.seed;
    let bank =
        speaker_bank(cfg.corpus.speakers, derive_seed(seed, Stream::Speakers, 0)).map_err(CliError::stage(STAGE))?;

    fresh_dir(STAGE, &wd.corpus())?;
    bank.par_iter().try_for_each(|spec| -> Result<()> {
        let dir = wd.corpus().join(speaker_dir(spec.speaker_id));
        fs::create_dir_all(&dir).map_err(io(STAGE))?;
        for u in 0..cfg.corpus.utterances {
            let index = spec.speaker_id as u64 * 1_000_000 + u as u64;
            let w = synth_utterance(spec, cfg.corpus.utterance_s, derive_seed(seed, Stream::Utterance, index))
                .map_err(CliError::stage(STAGE))?;
            write_wav(&dir.join(format!("utt{u:03}.wav")), &w).map_err(CliError::stage(STAGE))?;
        }
        Ok(())
    })?;
    write_json(
        STAGE,
        &wd.speakers_file(),
        &SpeakerManifest {
            seed,
            utterances: cfg.corpus.utterances,
            speakers: bank.clone(),
        },
    )?;

    let m = &cfg.mixtures;
    fresh_dir(STAGE, &wd.mixtures())?;
    (0..m.count).into_par_iter().try_for_each(|i| -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::MixtureSpeakers, i as u64));
        let specs: Vec<SpeakerSpec> = bank.choose_multiple(&mut rng, m.speakers).cloned().collect();
        let rec = synth_mixture(
            &specs,
            m.duration_s,
            m.overlap_fraction,
            m.gain_db,
            derive_seed(seed, Stream::Mixture, i as u64),
        )
        .map_err(CliError::stage(STAGE))?;
        let id = mix_id(i);
        let dir = wd.mixtures().join(&id);
        fs::create_dir_all(&dir).map_err(io(STAGE))?;
        write_wav(&dir.join("mixture.wav"), &rec.mixture).map_err(CliError::stage(STAGE))?;
        for (c, s) in rec.sources.iter().enumerate() {
            write_wav(&dir.join(format!("s{c}.wav")), s).map_err(CliError::stage(STAGE))?;
        }
        let meta = MixtureMeta {
            seed,
            mix_id: id,
            sample_rate: rec.mixture.sample_rate(),
            samples: rec.mixture.len(),
            speaker_ids: rec.speaker_ids.clone(),
            gains_db: rec.gains_db.clone(),
            overlap_fraction: rec.overlap_fraction(cfg.frame_len, cfg.hop),
            activity: rec.activity,
        };
        write_json(STAGE, &dir.join("meta.json"), &meta)
    })?;
    log_run(STAGE, wd)?;
    Ok(json!({ "stage": STAGE, "seed": seed, "speakers": bank.len(), "mixtures": m.count }))
}

/// Each speaker's utterances, concatenated and framed.
fn load_corpus(stage: &str, wd: &Workdir) -> Result<Vec<SpeakerFrames>> {
    let manifest: SpeakerManifest = read_json(stage, &wd.speakers_file(), "synth")?;
    manifest
        .speakers
        .iter()
        .map(|spec| {
            let dir = wd.corpus().join(speaker_dir(spec.speaker_id));
            let mut samples = Vec::new();
            let mut rate = None;
            for u in 0..manifest.utterances {
                let w = read_audio(stage, &dir.join(format!("utt{u:03}.wav")), "synth")?;
                rate = Some(w.sample_rate());
                samples.extend_from_slice(w.samples());
            }
            let rate = rate.ok_or_else(|| missing(stage, &dir, "speaker has no utterances"))?;
            let speech = Waveform::new(samples, rate).map_err(CliError::stage(stage))?;
            Ok(SpeakerFrames {
                speaker_id: spec.speaker_id,
                frames: frame(&speech, wd.config.frame_len, wd.config.hop).map_err(CliError::stage(stage))?,
            })
        })
        .collect()
}

pub fn pretrain(wd: &Workdir) -> Result<Summary> {
    const STAGE: &str = "pretrain";
    let cfg = &wd.config;
    let corpus = load_corpus(STAGE, wd)?;
    let encoder = cfg.encoder_config();
    let train_seed = derive_seed(cfg.seed, Stream::Pretrain, 0);
    let train = cfg.pretrain_config(train_seed);
    let dir = wd.checkpoints();
    fresh_dir(STAGE, &dir)?;

    let mut checkpoints = Vec::new();
    let mut save = |step: usize, store: &ParamStore| -> condeepmod::Result<()> {
        let file = checkpoint_name(step);
        store.save(&dir.join(&file))?;
        checkpoints.push(CheckpointEntry { step, file });
        Ok(())
    };
    if train.checkpoint_every > 0 {
        // The untrained encoder anchors the start of the trend.
        let mut initial = init_encoder(&encoder, train_seed).map_err(CliError::stage(STAGE))?;
        initial.round_to_f32();
        save(0, &initial).map_err(CliError::stage(STAGE))?;
    }
    let trained = pretrain_with(&corpus, &encoder, &train, &mut save).map_err(CliError::stage(STAGE))?;
    trained.store.save(&wd.encoder_file()).map_err(CliError::stage(STAGE))?;

    let mut trace = format!("# seed: {}\n", cfg.seed).into_bytes();
    write_trace_csv(&mut trace, &trained.trace).map_err(CliError::stage(STAGE))?;
    fs::write(dir.join("trace.csv"), trace).map_err(io(STAGE))?;
    let final_loss = trained.trace.last().map(|r| r.loss);
    write_json(
        STAGE,
        &wd.manifest_file(),
        &PretrainManifest {
            seed: cfg.seed,
            encoder,
            steps: train.steps,
            final_loss,
            checkpoints,
        },
    )?;
    log_run(STAGE, wd)?;
    Ok(json!({ "stage": STAGE, "seed": cfg.seed, "steps": train.steps, "final_loss": final_loss }))
}

pub fn build_graph_stage(wd: &Workdir) -> Result<Summary> {
    const STAGE: &str = "build-graph";
    let cfg = &wd.config;
    let ids = list_mixtures(STAGE, wd)?;
    let (encoder, params) = load_encoder(STAGE, wd)?;
    fresh_dir(STAGE, &wd.graphs())?;
    let summaries = ids
        .par_iter()
        .map(|id| -> Result<GraphSummary> {
            let dir = wd.mixtures().join(id);
            let meta: MixtureMeta = read_json(STAGE, &dir.join("meta.json"), "synth")?;
            let mixture = read_audio(STAGE, &dir.join("mixture.wav"), "synth")?;
            let sources = load_sources(STAGE, wd, id, &meta)?;
            let frames = frame(&mixture, cfg.frame_len, cfg.hop).map_err(CliError::stage(STAGE))?;
            let embeddings = encode(&encoder, &params, &frames).map_err(CliError::stage(STAGE))?;
            let graph = build_graph(&embeddings, cfg.theta).map_err(CliError::stage(STAGE))?;
            graph
                .save(&wd.graphs().join(format!("{id}.cdg")))
                .map_err(CliError::stage(STAGE))?;
            let oracle = oracle_frame_labels(&sources, cfg.frame_len, cfg.hop).map_err(CliError::stage(STAGE))?;
            let scores = partition_scores(&graph, &Partition::from_labels(oracle)).map_err(CliError::stage(STAGE))?;
            let summary = GraphSummary {
                seed: cfg.seed,
                mix_id: id.clone(),
                theta: cfg.theta,
                n: graph.n(),
                m: graph.m(),
                oracle_conductance: scores.conductance,
                oracle_modularity: scores.modularity,
            };
            write_json(STAGE, &wd.graphs().join(format!("{id}.json")), &summary)?;
            Ok(summary)
        })
        .collect::<Result<Vec<_>>>()?;
    log_run(STAGE, wd)?;
    let edges: usize = summaries.iter().map(|s| s.m).sum();
    Ok(json!({ "stage": STAGE, "seed": cfg.seed, "graphs": summaries.len(), "edges": edges }))
}

pub fn train_head_stage(wd: &Workdir) -> Result<Summary> {
    const STAGE: &str = "train-head";
    let cfg = &wd.config;
    let ids = list_mixtures(STAGE, wd)?;
    let (encoder, params) = load_encoder(STAGE, wd)?;
    let samples = ids
        .par_iter()
        .map(|id| {
            let (_, mg) = stored_mixture_graph(STAGE, wd, id, &encoder, &params)?;
            head_sample(&mg, cfg.method).map_err(CliError::stage(STAGE))
        })
        .collect::<Result<Vec<_>>>()?;
    fresh_dir(STAGE, &wd.heads())?;
    let fit = |samples: &[HeadSample], mixtures: Vec<String>, index: u64, path: PathBuf| -> Result<f64> {
        let head_seed = derive_seed(cfg.seed, Stream::Head, index);
        let trained = train_head(samples, &cfg.head, head_seed).map_err(CliError::stage(STAGE))?;
        trained.store.save(&path).map_err(CliError::stage(STAGE))?;
        let loss_final = trained.trace.last().copied().unwrap_or(f64::NAN);
        let summary = HeadSummary {
            seed: cfg.seed,
            head_seed,
            mode: cfg.head.mode,
            mixtures,
            steps: trained.steps(),
            loss_final,
        };
        write_json(STAGE, &path.with_extension("json"), &summary)?;
        Ok(loss_final)
    };
    let losses = match cfg.head.mode {
        HeadMode::PerMixture => ids
            .par_iter()
            .zip(&samples)
            .enumerate()
            .map(|(i, (id, sample))| {
                fit(
                    std::slice::from_ref(sample),
                    vec![id.clone()],
                    i as u64,
                    wd.heads().join(format!("{id}.cdm")),
                )
            })
            .collect::<Result<Vec<_>>>()?,
        HeadMode::Amortized => vec![fit(&samples, ids.clone(), u64::MAX / 2, wd.amortized_head())?],
    };
    log_run(STAGE, wd)?;
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(json!({ "stage": STAGE, "seed": cfg.seed, "heads": losses.len(), "mean_loss_final": mean }))
}

pub fn separate_stage(wd: &Workdir) -> Result<Summary> {
    const STAGE: &str = "separate";
    let cfg = &wd.config;
    let ids = list_mixtures(STAGE, wd)?;
    let (encoder, params) = load_encoder(STAGE, wd)?;
    let shared = match cfg.head.mode {
        HeadMode::Amortized => Some(load_params(STAGE, &wd.amortized_head(), "train-head")?),
        HeadMode::PerMixture => None,
    };
    fresh_dir(STAGE, &wd.outputs())?;
    let results = ids
        .par_iter()
        .map(|id| -> Result<SeparationResult> {
            let (mixture, mg) = stored_mixture_graph(STAGE, wd, id, &encoder, &params)?;
            let own;
            let head = match &shared {
                Some(store) => store,
                None => {
                    own = load_params(STAGE, &wd.heads().join(format!("{id}.cdm")), "train-head")?;
                    &own
                }
            };
            let sample = head_sample(&mg, cfg.method).map_err(CliError::stage(STAGE))?;
            let soft = assign(head, &sample.input).map_err(CliError::stage(STAGE))?;
            let loss_final = dmon_terms(soft.as_tensor(), &sample.operand)
                .map_err(CliError::stage(STAGE))?
                .total();
            let sep = finish_separation(&mixture, mg, soft, Vec::new(), &cfg.head).map_err(CliError::stage(STAGE))?;
            if !(sep.reconstruction_error <= RECONSTRUCTION_TOLERANCE) {
                return Err(CliError::Postcondition {
                    stage: STAGE.into(),
                    detail: format!("{id}: estimates miss the mixture by {:e}", sep.reconstruction_error),
                });
            }
            let dir = wd.outputs().join(id);
            fs::create_dir_all(&dir).map_err(io(STAGE))?;
            for (c, est) in sep.estimates.iter().enumerate() {
                write_wav(&dir.join(format!("est{c}.wav")), est).map_err(CliError::stage(STAGE))?;
            }
            let result = SeparationResult {
                seed: cfg.seed,
                mix_id: id.clone(),
                k_eff: sep.k_eff(),
                loss_final,
                Q: sep.scores.modularity,
                C: sep.scores.conductance,
                reconstruction_error: sep.reconstruction_error,
                assignments: sep.hardened.partition.labels().to_vec(),
            };
            write_json(STAGE, &dir.join("result.json"), &result)?;
            Ok(result)
        })
        .collect::<Result<Vec<_>>>()?;
    log_run(STAGE, wd)?;
    let k: Vec<usize> = results.iter().map(|r| r.k_eff).collect();
    Ok(json!({ "stage": STAGE, "seed": cfg.seed, "mixtures": results.len(), "k_eff": k }))
}

struct Scored {
    row: EvalRow,
    reconstruction_error: f64,
    scale_deviation_db: f64,
    mixture_si_snri: f64,
}

fn score_mixture(stage: &str, wd: &Workdir, id: &str) -> Result<Scored> {
    let cfg = &wd.config;
    let mix_dir = wd.mixtures().join(id);
    let out_dir = wd.outputs().join(id);
    let meta: MixtureMeta = read_json(stage, &mix_dir.join("meta.json"), "synth")?;
    let result: SeparationResult = read_json(stage, &out_dir.join("result.json"), "separate")?;
    let mixture = read_audio(stage, &mix_dir.join("mixture.wav"), "synth")?;
    let sources = load_sources(stage, wd, id, &meta)?;
    let estimates = (0..result.k_eff)
        .map(|c| read_audio(stage, &out_dir.join(format!("est{c}.wav")), "separate"))
        .collect::<Result<Vec<_>>>()?;
    let covered = frame(&mixture, cfg.frame_len, cfg.hop)
        .map_err(CliError::stage(stage))?
        .covered_len();
    let score = match_and_score_waveforms(&estimates, &sources, &mixture, covered).map_err(CliError::stage(stage))?;
    let oracle = oracle_frame_labels(&sources, cfg.frame_len, cfg.hop).map_err(CliError::stage(stage))?;
    let purity = cluster_purity(&result.assignments, &oracle).map_err(CliError::stage(stage))?;

    // Metric invariants re-checked on this run's signals.
    let cut = |w: &Waveform| w.samples()[..covered].to_vec();
    let (est0, ref0, mix) = (cut(&estimates[0]), cut(&sources[0]), cut(&mixture));
    let scaled: Vec<f64> = est0.iter().map(|v| -3.7 * v).collect();
    let base = si_snr(&est0, &ref0).map_err(CliError::stage(stage))?;
    let scale_deviation_db = (si_snr(&scaled, &ref0).map_err(CliError::stage(stage))? - base).abs();
    let refs: Vec<Vec<f64>> = sources.iter().map(cut).collect();
    let refs: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
    let trivial = vec![mix.as_slice(); refs.len()];
    let mixture_si_snri = match_and_score(&trivial, &refs, &mix)
        .map_err(CliError::stage(stage))?
        .si_snri_db;
    Ok(Scored {
        row: EvalRow {
            mix_id: id.into(),
            k_eff: result.k_eff,
            si_snri: score.si_snri_db,
            sdri: score.sdri_db,
            purity,
            C: result.C,
            Q: result.Q,
        },
        reconstruction_error: result.reconstruction_error,
        scale_deviation_db,
        mixture_si_snri,
    })
}

pub fn eval(wd: &Workdir) -> Result<Summary> {
    const STAGE: &str = "eval";
    let cfg = &wd.config;
    let ids = list_mixtures(STAGE, wd)?;
    let scored = ids
        .par_iter()
        .map(|id| score_mixture(STAGE, wd, id))
        .collect::<Result<Vec<_>>>()?;
    let invariants = InvariantReport {
        max_reconstruction_error: scored.iter().map(|s| s.reconstruction_error).fold(0.0, f64::max),
        max_scale_deviation_db: scored.iter().map(|s| s.scale_deviation_db).fold(0.0, f64::max),
        max_mixture_si_snri_abs: scored.iter().map(|s| s.mixture_si_snri.abs()).fold(0.0, f64::max),
    };
    let rows: Vec<EvalRow> = scored.into_iter().map(|s| s.row).collect();

    let dir = wd.reports();
    fs::create_dir_all(&dir).map_err(io(STAGE))?;
    let mut csv = Vec::new();
    let mut emit = || -> std::io::Result<()> {
        writeln!(csv, "# seed: {}", cfg.seed)?;
        writeln!(csv, "# {SDR_NOTE}")?;
        writeln!(csv, "mix_id,k_eff,si_snri,sdri,purity,C,Q")?;
        for r in &rows {
            writeln!(
                csv,
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4}",
                r.mix_id, r.k_eff, r.si_snri, r.sdri, r.purity, r.C, r.Q
            )?;
        }
        Ok(())
    };
    emit().map_err(io(STAGE))?;
    fs::write(dir.join("eval.csv"), csv).map_err(io(STAGE))?;

    let n = rows.len() as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let report = EvalReport {
        seed: cfg.seed,
        note: SDR_NOTE.into(),
        mixtures: rows.len(),
        mean_si_snri: mean(|r| r.si_snri),
        mean_sdri: mean(|r| r.sdri),
        mean_purity: mean(|r| r.purity),
        mean_k_eff: mean(|r| r.k_eff as f64),
        mean_C: mean(|r| r.C),
        mean_Q: mean(|r| r.Q),
        invariants,
        rows,
    };
    write_json(STAGE, &dir.join("eval.json"), &report)?;
    log_run(STAGE, wd)?;
    let inv = &report.invariants;
    if inv.max_scale_deviation_db > SCALE_INVARIANCE_TOLERANCE_DB || inv.max_mixture_si_snri_abs != 0.0 {
        return Err(CliError::Postcondition {
            stage: STAGE.into(),
            detail: format!(
                "metric invariants violated: scale deviation {:e} dB, mixture SI-SNRi {:e} dB",
                inv.max_scale_deviation_db, inv.max_mixture_si_snri_abs
            ),
        });
    }
    Ok(json!({
        "stage": STAGE,
        "seed": cfg.seed,
        "mixtures": report.mixtures,
        "mean_si_snri": report.mean_si_snri,
        "mean_purity": report.mean_purity,
    }))
}

pub fn trend_report(wd: &Workdir) -> Result<Summary> {
    const STAGE: &str = "trend-report";
    let cfg = &wd.config;
    let ids = list_mixtures(STAGE, wd)?;
    let corpus = load_corpus(STAGE, wd)?;
    let manifest: PretrainManifest = read_json(STAGE, &wd.manifest_file(), "pretrain")?;
    if manifest.checkpoints.len() < MIN_TREND_CHECKPOINTS {
        return Err(CliError::Usage(format!(
            "{STAGE}: {} checkpoints on disk, need at least {MIN_TREND_CHECKPOINTS}; \
             rerun `pretrain` with pretrain.checkpoint_every > 0",
            manifest.checkpoints.len()
        )));
    }
    let encoder = cfg.encoder_config();
    if manifest.encoder != encoder {
        return Err(CliError::Usage(format!(
            "{STAGE}: the encoder section or frame_len changed since `pretrain`; rerun it"
        )));
    }
    let batch = sample_pairs(&corpus, TREND_BATCH, derive_seed(cfg.seed, Stream::TrendBatch, 0))
        .map_err(CliError::stage(STAGE))?;
    let mixtures = ids
        .iter()
        .map(|id| read_audio(STAGE, &wd.mixtures().join(id).join("mixture.wav"), "synth"))
        .collect::<Result<Vec<_>>>()?;
    let separator = cfg.separator();

    let mut rows = Vec::with_capacity(manifest.checkpoints.len());
    for entry in &manifest.checkpoints {
        let params = load_params(STAGE, &wd.checkpoints().join(&entry.file), "pretrain")?;
        let emb = encode_tensor(&encoder, &params, &batch.frames).map_err(CliError::stage(STAGE))?;
        let loss = contrastive_loss_value(emb.as_tensor(), &batch.positives, cfg.pretrain.temperature)
            .map_err(CliError::stage(STAGE))?;
        let scores = mixtures
            .par_iter()
            .enumerate()
            .map(|(i, mixture)| {
                let seed = derive_seed(cfg.seed, Stream::Head, i as u64);
                separate(mixture, &encoder, &params, &separator, seed)
                    .map(|sep| sep.scores)
                    .map_err(CliError::stage(STAGE))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = scores.len() as f64;
        rows.push(TrendRow {
            step: entry.step,
            loss,
            C: scores.iter().map(|s| s.conductance).sum::<f64>() / n,
            Q: scores.iter().map(|s| s.modularity).sum::<f64>() / n,
        });
    }
    let losses: Vec<f64> = rows.iter().map(|r| r.loss).collect();
    let rho = |f: fn(&TrendRow) -> f64| spearman(&losses, &rows.iter().map(f).collect::<Vec<_>>()).ok();
    let report = TrendReport {
        seed: cfg.seed,
        theta: cfg.theta,
        mixtures: mixtures.len(),
        spearman_loss_conductance: rho(|r| r.C),
        spearman_loss_modularity: rho(|r| r.Q),
        rows,
    };

    let dir = wd.reports();
    fs::create_dir_all(&dir).map_err(io(STAGE))?;
    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    let mut csv = Vec::new();
    let mut emit = || -> std::io::Result<()> {
        writeln!(csv, "# seed: {}", cfg.seed)?;
        writeln!(csv, "# spearman(loss, C): {}", fmt(report.spearman_loss_conductance))?;
        writeln!(csv, "# spearman(loss, Q): {}", fmt(report.spearman_loss_modularity))?;
        writeln!(csv, "step,loss,C,Q")?;
        for r in &report.rows {
            writeln!(csv, "{},{:.6},{:.4},{:.4}", r.step, r.loss, r.C, r.Q)?;
        }
        Ok(())
    };
    emit().map_err(io(STAGE))?;
    fs::write(dir.join("trend.csv"), csv).map_err(io(STAGE))?;
    write_json(STAGE, &dir.join("trend.json"), &report)?;
    log_run(STAGE, wd)?;
    Ok(json!({
        "stage": STAGE,
        "seed": cfg.seed,
        "checkpoints": report.rows.len(),
        "spearman_loss_conductance": report.spearman_loss_conductance,
        "spearman_loss_modularity": report.spearman_loss_modularity,
    }))
}
