//! Synthetic task corpora, audio rendering, and dataset file formats.
//!
//! Four tasks stand in for real datasets: transcription (asr), intent
//! classification (ic, class-correlated word pools), keyword spotting (kws,
//! 70/30 positive/negative), and emotion recognition (er, carried by a
//! non-lexical per-style offset so the label is unreadable from the
//! transcript). Audio is a deterministic embedding-per-word sequence plus
//! Gaussian noise. Generation is bit-reproducible for a fixed config.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid_arg, Error, Result};
use crate::joint::{JointOutput, JointPrompt, JointTask};
use crate::tensor::Tensor;
use crate::vocab::TokenVocab;

pub const TASK_IDS: [&str; 4] = ["asr", "ic", "kws", "er"];

const ASR_WORDS: &[&str] = &[
    "river", "stone", "cloud", "amber", "forest", "quiet", "silver", "march", "hollow", "ember",
    "winter", "lantern", "meadow", "copper", "drift", "harbor", "violet", "thunder", "orchard",
    "breeze", "granite", "willow", "saffron", "dusk",
];

const IC_CLASSES: &[(&str, &[&str])] = &[
    ("play_radio", &["play", "radio", "music", "song", "tune", "station", "volume", "loud"]),
    ("datetime_query", &["time", "date", "clock", "today", "tomorrow", "hour", "calendar", "week"]),
    ("cooking_recipe", &["cook", "recipe", "bake", "oven", "flour", "dinner", "kitchen", "meal"]),
];

const ER_STYLES: &[&str] = &["neutral", "happy", "sad", "angry"];

const ASR_PROMPTS: &[&str] = &[
    "transcribe the audio",
    "write down what is said in the recording",
    "perform speech recognition on the preceding audio",
];
const IC_PROMPTS: &[&str] = &[
    "classify the intent as play_radio datetime_query or cooking_recipe",
    "what is the intent of this spoken request",
    "choose the intent label for the audio",
];
const KWS_PROMPTS: &[&str] = &[
    "did the speaker say the word {kw} answer yes or no",
    "was {kw} mentioned in the audio answer yes or no",
    "answer yes or no does the recording contain {kw}",
];
const ER_PROMPTS: &[&str] = &[
    "classify the tone of the speaker as happy sad angry or neutral",
    "what emotion does the speaker convey",
    "identify the emotional state in the audio",
];

/// Display name used for a task inside joint prompts and records.
pub fn joint_name(task_id: &str) -> &'static str {
    match task_id {
        "asr" => "ASR",
        "ic" => "IC",
        "kws" => "KWS",
        "er" => "Emotion",
        _ => "TASK",
    }
}

pub const DATA_RNG_STREAM: u64 = 1;

#[derive(Debug, Clone)]
pub struct TaskGenConfig {
    pub tasks: Vec<String>,
    pub raw_dim: usize,
    pub frames_per_token: usize,
    pub noise_sigma: f64,
    pub style_scale: f64,
    pub train_per_task: usize,
    pub valid_per_task: usize,
    pub test_per_task: usize,
    pub kws_positive_ratio: f64,
    /// Fraction of ic/er training samples rendered in the joint
    /// transcript-plus-answer format.
    pub joint_fraction: f64,
    pub asr_min_words: usize,
    pub asr_max_words: usize,
    pub weights: BTreeMap<String, f64>,
    pub seed: u64,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        TaskGenConfig {
            tasks: TASK_IDS.iter().map(|s| s.to_string()).collect(),
            raw_dim: 16,
            frames_per_token: 4,
            noise_sigma: 0.1,
            style_scale: 1.0,
            train_per_task: 256,
            valid_per_task: 32,
            test_per_task: 64,
            kws_positive_ratio: 0.7,
            joint_fraction: 0.25,
            asr_min_words: 3,
            asr_max_words: 8,
            weights: TASK_IDS.iter().map(|s| (s.to_string(), 1.0)).collect(),
            seed: 0,
        }
    }
}

impl TaskGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            invalid_arg!("at least one task is required");
        }
        for t in &self.tasks {
            if !TASK_IDS.contains(&t.as_str()) {
                invalid_arg!("unknown task id {t:?} (known: {TASK_IDS:?})");
            }
        }
        if self.asr_min_words == 0 || self.asr_min_words > self.asr_max_words {
            invalid_arg!("bad transcript length range");
        }
        if !(0.0..=1.0).contains(&self.kws_positive_ratio) {
            invalid_arg!("kws_positive_ratio must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.joint_fraction) {
            invalid_arg!("joint_fraction must be in [0, 1]");
        }
        if self.raw_dim == 0 || self.frames_per_token == 0 {
            invalid_arg!("audio dimensions must be positive");
        }
        Ok(())
    }

    pub fn weight_of(&self, task_id: &str) -> f64 {
        self.weights.get(task_id).copied().unwrap_or(1.0)
    }
}

/// Static description of one synthetic task.
#[derive(Debug, Clone)]
pub struct ToyTaskSpec {
    pub task_id: String,
    pub content_words: Vec<String>,
    pub label_set: Vec<String>,
    pub prompts: Vec<String>,
}

pub fn task_spec(task_id: &str) -> Result<ToyTaskSpec> {
    let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    match task_id {
        "asr" => Ok(ToyTaskSpec {
            task_id: "asr".into(),
            content_words: s(ASR_WORDS),
            label_set: vec![],
            prompts: s(ASR_PROMPTS),
        }),
        "ic" => Ok(ToyTaskSpec {
            task_id: "ic".into(),
            content_words: IC_CLASSES
                .iter()
                .flat_map(|(_, pool)| pool.iter().map(|w| w.to_string()))
                .collect(),
            label_set: IC_CLASSES.iter().map(|(c, _)| c.to_string()).collect(),
            prompts: s(IC_PROMPTS),
        }),
        "kws" => Ok(ToyTaskSpec {
            task_id: "kws".into(),
            content_words: s(ASR_WORDS),
            label_set: vec!["yes".into(), "no".into()],
            prompts: s(KWS_PROMPTS),
        }),
        "er" => Ok(ToyTaskSpec {
            task_id: "er".into(),
            content_words: s(ASR_WORDS),
            label_set: s(ER_STYLES),
            prompts: s(ER_PROMPTS),
        }),
        other => Err(Error::InvalidArgument(format!("unknown task id {other:?}"))),
    }
}

/// Deterministic word-to-embedding table plus per-style offsets.
#[derive(Debug, Clone)]
pub struct AudioPalette {
    pub raw_dim: usize,
    pub frames_per_token: usize,
    pub style_scale: f64,
    embeddings: BTreeMap<String, Vec<f64>>,
    style_offsets: Vec<Vec<f64>>,
}

impl AudioPalette {
    pub fn new(cfg: &TaskGenConfig) -> Self {
        // A dedicated stream keyed only by the seed: the palette must not
        // depend on task selection or sample counts.
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        rng.set_stream(DATA_RNG_STREAM);
        let normal = Normal::new(0.0, 1.0).unwrap();

        // Intent pool words share a per-class direction so mean-pooled
        // features separate the classes by construction; each word keeps its
        // own jitter so transcripts stay word-identifiable.
        let mut class_centers: Vec<Vec<f64>> = Vec::new();
        for _ in 0..IC_CLASSES.len() {
            let mut c: Vec<f64> = (0..cfg.raw_dim).map(|_| normal.sample(&mut rng)).collect();
            let norm: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in c.iter_mut() {
                *v /= norm;
            }
            class_centers.push(c);
        }
        let class_of = |w: &str| -> Option<usize> {
            IC_CLASSES
                .iter()
                .position(|(_, pool)| pool.contains(&w))
        };

        let mut words: Vec<String> = ASR_WORDS.iter().map(|w| w.to_string()).collect();
        words.extend(
            IC_CLASSES
                .iter()
                .flat_map(|(_, pool)| pool.iter().map(|w| w.to_string())),
        );
        words.sort();
        words.dedup();

        const CLASS_SEP: f64 = 2.5;
        const CLASS_JITTER: f64 = 0.7;
        let mut embeddings = BTreeMap::new();
        for w in words {
            let e: Vec<f64> = match class_of(&w) {
                Some(k) => (0..cfg.raw_dim)
                    .map(|i| CLASS_SEP * class_centers[k][i] + CLASS_JITTER * normal.sample(&mut rng))
                    .collect(),
                None => (0..cfg.raw_dim).map(|_| normal.sample(&mut rng)).collect(),
            };
            embeddings.insert(w, e);
        }
        let mut style_offsets = Vec::new();
        for _ in 0..ER_STYLES.len() {
            let mut o: Vec<f64> = (0..cfg.raw_dim).map(|_| normal.sample(&mut rng)).collect();
            let norm: f64 = o.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in o.iter_mut() {
                *v /= norm;
            }
            style_offsets.push(o);
        }
        AudioPalette {
            raw_dim: cfg.raw_dim,
            frames_per_token: cfg.frames_per_token,
            style_scale: cfg.style_scale,
            embeddings,
            style_offsets,
        }
    }

    pub fn style_offset(&self, style: usize) -> &[f64] {
        &self.style_offsets[style]
    }
}

/// Rendered synthetic audio with its provenance.
#[derive(Debug, Clone)]
pub struct SyntheticAudio {
    pub features: Tensor,
    pub tokens: Vec<String>,
    pub style: Option<usize>,
    pub noise_sigma: f64,
}

/// Render tokens into `[T, raw_dim]` features: each token's fixed embedding
/// repeated `frames_per_token` times, plus a scaled per-style offset on every
/// frame, plus Gaussian noise.
pub fn render_audio(
    tokens: &[String],
    style: Option<usize>,
    noise_sigma: f64,
    palette: &AudioPalette,
    rng: &mut ChaCha20Rng,
) -> Result<SyntheticAudio> {
    if tokens.is_empty() {
        invalid_arg!("cannot render empty token sequence");
    }
    if let Some(s) = style {
        if s >= palette.style_offsets.len() {
            invalid_arg!("style index {s} out of range");
        }
    }
    let d = palette.raw_dim;
    let fpt = palette.frames_per_token;
    let t = tokens.len() * fpt;
    let mut data = Vec::with_capacity(t * d);
    for tok in tokens {
        let emb = palette
            .embeddings
            .get(tok)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown content token {tok:?}")))?;
        for _ in 0..fpt {
            data.extend_from_slice(emb);
        }
    }
    if let Some(s) = style {
        let offset = &palette.style_offsets[s];
        for frame in 0..t {
            for (i, &o) in offset.iter().enumerate() {
                data[frame * d + i] += palette.style_scale * o;
            }
        }
    }
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).unwrap();
        for v in data.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(SyntheticAudio {
        features: Tensor::matrix(t, d, data)?,
        tokens: tokens.to_vec(),
        style,
        noise_sigma,
    })
}

/// One training/evaluation tuple.
#[derive(Debug, Clone)]
pub struct TaskSample {
    pub id: u64,
    pub task_id: String,
    pub audio: Tensor,
    /// The spoken word sequence (also the label for asr).
    pub transcript: String,
    pub prompt_text: String,
    pub label_text: String,
    pub style: Option<usize>,
    pub weight: f64,
    pub joint: bool,
    pub prompt_ids: Vec<usize>,
    pub label_ids: Vec<usize>,
}

impl TaskSample {
    /// Teacher-forcing target: label tokens closed by eos.
    pub fn target_ids(&self, eos: usize) -> Vec<usize> {
        let mut t = self.label_ids.clone();
        t.push(eos);
        t
    }
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: ToyTaskSpec,
    pub weight: f64,
    pub train: Vec<TaskSample>,
    pub valid: Vec<TaskSample>,
    pub test: Vec<TaskSample>,
    /// Joint-format twins of `test` (same audio and gold content), present
    /// for tasks that support joint decoding (ic, er).
    pub test_joint: Vec<TaskSample>,
}

#[derive(Debug)]
pub struct Suite {
    pub cfg: TaskGenConfig,
    pub vocab: TokenVocab,
    pub palette: AudioPalette,
    pub tasks: Vec<TaskData>,
}

impl Suite {
    pub fn task(&self, task_id: &str) -> Option<&TaskData> {
        self.tasks.iter().find(|t| t.spec.task_id == task_id)
    }
}

/// Enumerate every token the corpus can produce. The vocabulary is a pure
/// function of the static word lists, so any component can rebuild it from
/// the config alone.
pub fn build_vocab() -> TokenVocab {
    let mut texts: Vec<String> = Vec::new();
    for id in TASK_IDS {
        let spec = task_spec(id).expect("static specs are valid");
        texts.extend(spec.content_words.iter().cloned());
        texts.extend(spec.label_set.iter().cloned());
        for p in &spec.prompts {
            texts.push(p.replace("{kw}", "river"));
        }
    }
    // Joint scaffolding: headers, block markers, directives, record tokens.
    for id in ["ic", "er"] {
        let spec = task_spec(id).expect("static specs are valid");
        for asr_prompt in ASR_PROMPTS {
            for task_prompt in &spec.prompts {
                let jp = JointPrompt::new(vec![
                    JointTask {
                        name: "ASR".into(),
                        instruction: asr_prompt.to_string(),
                    },
                    JointTask {
                        name: joint_name(id).into(),
                        instruction: task_prompt.clone(),
                    },
                ])
                .expect("two tasks");
                texts.push(jp.render());
            }
        }
        let dummy = JointOutput {
            fields: vec![
                ("ASR".into(), "river".into()),
                (joint_name(id).into(), spec.label_set[0].clone()),
            ],
        };
        texts.push(dummy.serialize().expect("serializable"));
    }
    let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
    TokenVocab::build(TokenVocab::tokens_of(&refs))
}

struct GenState<'a> {
    cfg: &'a TaskGenConfig,
    palette: &'a AudioPalette,
    vocab: &'a TokenVocab,
    rng: ChaCha20Rng,
    next_id: u64,
}

impl<'a> GenState<'a> {
    fn words_from<'b>(&mut self, pool: &'b [String], n: usize) -> Vec<String> {
        (0..n)
            .map(|_| pool[self.rng.gen_range(0..pool.len())].clone())
            .collect()
    }

    fn transcript_len(&mut self) -> usize {
        self.rng
            .gen_range(self.cfg.asr_min_words..=self.cfg.asr_max_words)
    }

    fn prompt_from(&mut self, prompts: &[String]) -> String {
        prompts[self.rng.gen_range(0..prompts.len())].clone()
    }

    fn finish_sample(
        &mut self,
        task_id: &str,
        tokens: Vec<String>,
        style: Option<usize>,
        prompt_text: String,
        label_text: String,
        joint: bool,
    ) -> Result<TaskSample> {
        let audio = render_audio(
            &tokens,
            style,
            self.cfg.noise_sigma,
            self.palette,
            &mut self.rng,
        )?;
        let id = self.next_id;
        self.next_id += 1;
        let prompt_ids = self.vocab.tokenize(&prompt_text)?;
        let label_ids = self.vocab.tokenize(&label_text)?;
        Ok(TaskSample {
            id,
            task_id: task_id.to_string(),
            audio: audio.features,
            transcript: tokens.join(" "),
            prompt_text,
            label_text,
            style,
            weight: self.cfg.weight_of(task_id),
            joint,
            prompt_ids,
            label_ids,
        })
    }

    fn joint_prompt_and_label(
        &mut self,
        task_id: &str,
        spec: &ToyTaskSpec,
        transcript: &str,
        answer: &str,
    ) -> Result<(String, String)> {
        let asr_instruction = ASR_PROMPTS[self.rng.gen_range(0..ASR_PROMPTS.len())].to_string();
        let task_instruction = self.prompt_from(&spec.prompts);
        let jp = JointPrompt::new(vec![
            JointTask {
                name: "ASR".into(),
                instruction: asr_instruction,
            },
            JointTask {
                name: joint_name(task_id).into(),
                instruction: task_instruction,
            },
        ])?;
        let label = JointOutput {
            fields: vec![
                ("ASR".into(), transcript.to_string()),
                (joint_name(task_id).into(), answer.to_string()),
            ],
        }
        .serialize()?;
        Ok((jp.render(), label))
    }

    fn gen_asr(&mut self, spec: &ToyTaskSpec, n: usize, _joint: bool) -> Result<Vec<TaskSample>> {
        (0..n)
            .map(|_| {
                let len = self.transcript_len();
                let tokens = self.words_from(&spec.content_words, len);
                let prompt = self.prompt_from(&spec.prompts);
                let label = tokens.join(" ");
                self.finish_sample("asr", tokens, None, prompt, label, false)
            })
            .collect()
    }

    fn gen_ic(&mut self, spec: &ToyTaskSpec, n: usize, allow_joint: bool) -> Result<Vec<TaskSample>> {
        let pools: Vec<Vec<String>> = IC_CLASSES
            .iter()
            .map(|(_, pool)| pool.iter().map(|w| w.to_string()).collect())
            .collect();
        (0..n)
            .map(|i| {
                let class = i % spec.label_set.len();
                let len = self.transcript_len();
                let tokens = self.words_from(&pools[class], len);
                let answer = spec.label_set[class].clone();
                let joint = allow_joint && self.rng.gen::<f64>() < self.cfg.joint_fraction;
                let transcript = tokens.join(" ");
                let (prompt, label) = if joint {
                    self.joint_prompt_and_label("ic", spec, &transcript, &answer)?
                } else {
                    (self.prompt_from(&spec.prompts), answer)
                };
                self.finish_sample("ic", tokens, None, prompt, label, joint)
            })
            .collect()
    }

    fn gen_kws(&mut self, spec: &ToyTaskSpec, n: usize, _joint: bool) -> Result<Vec<TaskSample>> {
        let n_pos = (n as f64 * self.cfg.kws_positive_ratio).round() as usize;
        let mut polarity: Vec<bool> = (0..n).map(|i| i < n_pos).collect();
        polarity.shuffle(&mut self.rng);
        polarity
            .into_iter()
            .map(|positive| {
                let len = self.transcript_len();
                let tokens = self.words_from(&spec.content_words, len);
                let keyword = if positive {
                    tokens[self.rng.gen_range(0..tokens.len())].clone()
                } else {
                    let absent: Vec<&String> = spec
                        .content_words
                        .iter()
                        .filter(|w| !tokens.contains(w))
                        .collect();
                    absent[self.rng.gen_range(0..absent.len())].clone()
                };
                let prompt = self.prompt_from(&spec.prompts).replace("{kw}", &keyword);
                let label = if positive { "yes" } else { "no" }.to_string();
                self.finish_sample("kws", tokens, None, prompt, label, false)
            })
            .collect()
    }

    fn gen_er(&mut self, spec: &ToyTaskSpec, n: usize, allow_joint: bool) -> Result<Vec<TaskSample>> {
        (0..n)
            .map(|i| {
                let style = i % ER_STYLES.len();
                let len = self.transcript_len();
                let tokens = self.words_from(&spec.content_words, len);
                let answer = ER_STYLES[style].to_string();
                let joint = allow_joint && self.rng.gen::<f64>() < self.cfg.joint_fraction;
                let transcript = tokens.join(" ");
                let (prompt, label) = if joint {
                    self.joint_prompt_and_label("er", spec, &transcript, &answer)?
                } else {
                    (self.prompt_from(&spec.prompts), answer)
                };
                self.finish_sample("er", tokens, Some(style), prompt, label, joint)
            })
            .collect()
    }

    fn gen(&mut self, task_id: &str, spec: &ToyTaskSpec, n: usize, allow_joint: bool) -> Result<Vec<TaskSample>> {
        match task_id {
            "asr" => self.gen_asr(spec, n, allow_joint),
            "ic" => self.gen_ic(spec, n, allow_joint),
            "kws" => self.gen_kws(spec, n, allow_joint),
            "er" => self.gen_er(spec, n, allow_joint),
            other => Err(Error::InvalidArgument(format!("unknown task {other:?}"))),
        }
    }
}

/// Convert a plain test sample into its joint-format twin: same audio and
/// gold content, compound prompt, serialized transcript-plus-answer label.
fn joint_twin(state: &mut GenState, spec: &ToyTaskSpec, sample: &TaskSample) -> Result<TaskSample> {
    let (prompt, label) =
        state.joint_prompt_and_label(&sample.task_id, spec, &sample.transcript, &sample.label_text)?;
    let prompt_ids = state.vocab.tokenize(&prompt)?;
    let label_ids = state.vocab.tokenize(&label)?;
    let id = state.next_id;
    state.next_id += 1;
    Ok(TaskSample {
        id,
        prompt_text: prompt,
        label_text: label,
        prompt_ids,
        label_ids,
        joint: true,
        ..sample.clone()
    })
}

/// Generate the full suite: vocabulary, palette, and per-task splits.
pub fn generate_suite(cfg: &TaskGenConfig) -> Result<Suite> {
    cfg.validate()?;
    let vocab = build_vocab();
    let palette = AudioPalette::new(cfg);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(DATA_RNG_STREAM + 1);
    let mut state = GenState {
        cfg,
        palette: &palette,
        vocab: &vocab,
        rng,
        next_id: 0,
    };

    let mut tasks = Vec::new();
    for task_id in &cfg.tasks {
        let spec = task_spec(task_id)?;
        let train = state.gen(task_id, &spec, cfg.train_per_task, true)?;
        let valid = state.gen(task_id, &spec, cfg.valid_per_task, false)?;
        let test = state.gen(task_id, &spec, cfg.test_per_task, false)?;
        let test_joint = if matches!(task_id.as_str(), "ic" | "er") {
            test.iter()
                .map(|s| joint_twin(&mut state, &spec, s))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        tasks.push(TaskData {
            weight: cfg.weight_of(task_id),
            spec,
            train,
            valid,
            test,
            test_joint,
        });
    }
    Ok(Suite {
        cfg: cfg.clone(),
        vocab,
        palette,
        tasks,
    })
}

// ---------------------------------------------------------------------------
// Dataset files: tab-separated manifests plus little-endian binary audio.

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub task_id: String,
    pub audio_file: String,
    pub prompt: String,
    pub label: String,
    pub weight: f64,
}

fn escape_field(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some('\\') => out.push('\\'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Audio file layout: frame count and dim as little-endian u64, then the
/// row-major feature payload as little-endian f64.
pub fn write_audio_file(path: &Path, audio: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + audio.numel() * 8);
    bytes.extend_from_slice(&(audio.rows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(audio.cols() as u64).to_le_bytes());
    bytes.extend_from_slice(&audio.to_le_bytes());
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_audio_file(path: &Path) -> Result<Tensor> {
    let mut f = fs::File::open(path)?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header)
        .map_err(|_| Error::InvalidArgument(format!("{}: truncated audio header", path.display())))?;
    let rows = u64::from_le_bytes(header[0..8].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    if payload.len() != rows * cols * 8 {
        invalid_arg!(
            "{}: payload is {} bytes, expected {} for [{rows}, {cols}]",
            path.display(),
            payload.len(),
            rows * cols * 8
        );
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// Write one split's manifest and audio files. The manifest has one
/// tab-separated record per line: task_id, audio_file, prompt, label, weight.
/// Audio paths are relative to the manifest directory.
pub fn write_manifest(dir: &Path, task_id: &str, split: &str, samples: &[TaskSample]) -> Result<PathBuf> {
    let audio_dir = dir.join("audio");
    fs::create_dir_all(&audio_dir)?;
    let manifest_path = dir.join(format!("{task_id}.{split}.tsv"));
    let mut out = String::new();
    for (i, s) in samples.iter().enumerate() {
        let audio_rel = format!("audio/{task_id}_{split}_{i:05}.bin");
        write_audio_file(&dir.join(&audio_rel), &s.audio)?;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            s.task_id,
            audio_rel,
            escape_field(&s.prompt_text),
            escape_field(&s.label_text),
            s.weight,
        ));
    }
    let mut f = fs::File::create(&manifest_path)?;
    f.write_all(out.as_bytes())?;
    Ok(manifest_path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            invalid_arg!(
                "{}:{}: expected 5 tab-separated fields, got {}",
                path.display(),
                ln + 1,
                fields.len()
            );
        }
        let weight: f64 = fields[4]
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("{}:{}: bad weight", path.display(), ln + 1)))?;
        rows.push(ManifestRow {
            task_id: fields[0].to_string(),
            audio_file: fields[1].to_string(),
            prompt: unescape_field(fields[2]),
            label: unescape_field(fields[3]),
            weight,
        });
    }
    Ok(rows)
}

/// Materialize manifest rows back into task samples, loading audio relative
/// to the manifest location and tokenizing with the canonical vocabulary.
pub fn load_samples(manifest: &Path, vocab: &TokenVocab) -> Result<Vec<TaskSample>> {
    let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
    let rows = read_manifest(manifest)?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        let audio = read_audio_file(&dir.join(&row.audio_file))?;
        let prompt_ids = vocab.tokenize(&row.prompt)?;
        let label_ids = vocab.tokenize(&row.label)?;
        let joint = row.prompt.contains("=== Task:");
        out.push(TaskSample {
            id: i as u64,
            task_id: row.task_id,
            audio,
            transcript: String::new(),
            prompt_text: row.prompt,
            label_text: row.label,
            style: None,
            weight: row.weight,
            joint,
            prompt_ids,
            label_ids,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> TaskGenConfig {
        TaskGenConfig {
            train_per_task: 20,
            valid_per_task: 6,
            test_per_task: 10,
            seed: 7,
            ..TaskGenConfig::default()
        }
    }

    #[test]
    fn render_audio_is_deterministic_and_shaped() {
        let cfg = small_cfg();
        let palette = AudioPalette::new(&cfg);
        let tokens: Vec<String> = ["river", "stone"].iter().map(|s| s.to_string()).collect();
        let mut r1 = ChaCha20Rng::seed_from_u64(1);
        let mut r2 = ChaCha20Rng::seed_from_u64(1);
        let a = render_audio(&tokens, None, 0.2, &palette, &mut r1).unwrap();
        let b = render_audio(&tokens, None, 0.2, &palette, &mut r2).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.features.shape(), &[2 * cfg.frames_per_token, cfg.raw_dim]);
        // Zero noise: exactly the embedding repeated.
        let mut r = ChaCha20Rng::seed_from_u64(2);
        let c = render_audio(&tokens, None, 0.0, &palette, &mut r).unwrap();
        let first = &c.features.data()[..cfg.raw_dim];
        let second = &c.features.data()[cfg.raw_dim..2 * cfg.raw_dim];
        assert_eq!(first, second);
    }

    #[test]
    fn style_offset_shifts_frame_means() {
        let cfg = small_cfg();
        let palette = AudioPalette::new(&cfg);
        let tokens: Vec<String> = vec!["river".into()];
        let mut r = ChaCha20Rng::seed_from_u64(3);
        let a = render_audio(&tokens, Some(0), 0.0, &palette, &mut r).unwrap();
        let b = render_audio(&tokens, Some(1), 0.0, &palette, &mut r).unwrap();
        for i in 0..cfg.raw_dim {
            let diff = a.features.data()[i] - b.features.data()[i];
            let want = cfg.style_scale * (palette.style_offset(0)[i] - palette.style_offset(1)[i]);
            assert!((diff - want).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_token_is_invalid() {
        let cfg = small_cfg();
        let palette = AudioPalette::new(&cfg);
        let mut r = ChaCha20Rng::seed_from_u64(4);
        assert!(render_audio(&["nope".to_string()], None, 0.0, &palette, &mut r).is_err());
    }

    #[test]
    fn suite_regeneration_is_bit_identical() {
        let cfg = small_cfg();
        let a = generate_suite(&cfg).unwrap();
        let b = generate_suite(&cfg).unwrap();
        assert_eq!(a.tasks.len(), b.tasks.len());
        for (ta, tb) in a.tasks.iter().zip(&b.tasks) {
            for (sa, sb) in ta.train.iter().zip(&tb.train) {
                assert_eq!(sa.audio, sb.audio);
                assert_eq!(sa.prompt_text, sb.prompt_text);
                assert_eq!(sa.label_text, sb.label_text);
            }
        }
    }

    #[test]
    fn sample_ids_are_disjoint_across_splits() {
        let suite = generate_suite(&small_cfg()).unwrap();
        let mut seen = std::collections::HashSet::new();
        for task in &suite.tasks {
            for s in task
                .train
                .iter()
                .chain(&task.valid)
                .chain(&task.test)
                .chain(&task.test_joint)
            {
                assert!(seen.insert(s.id), "duplicate sample id {}", s.id);
            }
        }
    }

    #[test]
    fn asr_label_equals_transcript() {
        let suite = generate_suite(&small_cfg()).unwrap();
        for s in &suite.task("asr").unwrap().train {
            assert_eq!(s.label_text, s.transcript);
        }
    }

    #[test]
    fn kws_split_is_seventy_thirty() {
        let cfg = TaskGenConfig {
            train_per_task: 100,
            ..small_cfg()
        };
        let suite = generate_suite(&cfg).unwrap();
        let kws = suite.task("kws").unwrap();
        let pos = kws.train.iter().filter(|s| s.label_text == "yes").count();
        assert_eq!(pos, 70);
        assert_eq!(kws.train.len() - pos, 30);
        // Positive keyword really is in the transcript; negative is not.
        for s in &kws.train {
            let kw = s
                .prompt_text
                .split_whitespace()
                .find(|w| suite.task("kws").unwrap().spec.content_words.iter().any(|c| c == w))
                .expect("prompt embeds a keyword");
            let spoken: Vec<&str> = s.transcript.split_whitespace().collect();
            if s.label_text == "yes" {
                assert!(spoken.contains(&kw), "positive keyword must be spoken");
            } else {
                assert!(!spoken.contains(&kw), "negative keyword must be absent");
            }
        }
    }

    #[test]
    fn er_labels_come_from_style_not_words() {
        let suite = generate_suite(&small_cfg()).unwrap();
        let er = suite.task("er").unwrap();
        for s in &er.train {
            if !s.joint {
                assert_eq!(s.label_text, ER_STYLES[s.style.unwrap()]);
            }
        }
        // The same transcript words can carry any style; labels only track
        // the style channel.
        let styles: std::collections::HashSet<_> =
            er.train.iter().filter_map(|s| s.style).collect();
        assert_eq!(styles.len(), ER_STYLES.len());
    }

    #[test]
    fn joint_samples_parse_back_to_transcript_and_answer() {
        let cfg = TaskGenConfig {
            joint_fraction: 1.0,
            ..small_cfg()
        };
        let suite = generate_suite(&cfg).unwrap();
        let ic = suite.task("ic").unwrap();
        assert!(ic.train.iter().all(|s| s.joint));
        for s in &ic.train {
            let parsed = crate::joint::parse_joint(&s.label_text).unwrap();
            assert_eq!(parsed.get("ASR"), Some(s.transcript.as_str()));
            assert!(ic.spec.label_set.iter().any(|c| Some(c.as_str()) == parsed.get("IC")));
            // Prompt carries both task blocks.
            assert!(s.prompt_text.contains("=== Task: ASR ==="));
            assert!(s.prompt_text.contains("=== Task: IC ==="));
        }
        assert_eq!(ic.test_joint.len(), ic.test.len());
        for (plain, twin) in ic.test.iter().zip(&ic.test_joint) {
            assert_eq!(plain.audio, twin.audio);
            assert!(twin.joint);
        }
    }

    #[test]
    fn all_generated_text_tokenizes_with_the_static_vocab() {
        let cfg = TaskGenConfig {
            joint_fraction: 0.5,
            ..small_cfg()
        };
        let suite = generate_suite(&cfg).unwrap();
        for task in &suite.tasks {
            for s in task
                .train
                .iter()
                .chain(&task.valid)
                .chain(&task.test)
                .chain(&task.test_joint)
            {
                assert!(!s.prompt_ids.is_empty());
                assert!(!s.label_ids.is_empty());
                // Labels round-trip through the vocabulary.
                assert_eq!(suite.vocab.detokenize(&s.label_ids), s.label_text);
            }
        }
    }

    #[test]
    fn ic_classes_are_linearly_separable_by_mean_features() {
        // Nearest-class-mean probe on mean-pooled raw features; documented
        // separability threshold is noise_sigma <= 0.5.
        for sigma in [0.1, 0.5] {
            let cfg = TaskGenConfig {
                noise_sigma: sigma,
                train_per_task: 60,
                test_per_task: 60,
                joint_fraction: 0.0,
                ..small_cfg()
            };
            let suite = generate_suite(&cfg).unwrap();
            let ic = suite.task("ic").unwrap();
            let mean_of = |s: &TaskSample| {
                let d = s.audio.cols();
                let mut m = vec![0.0; d];
                for r in 0..s.audio.rows() {
                    for c in 0..d {
                        m[c] += s.audio.at(r, c);
                    }
                }
                for v in m.iter_mut() {
                    *v /= s.audio.rows() as f64;
                }
                m
            };
            let classes = &ic.spec.label_set;
            let mut means = vec![vec![0.0; cfg.raw_dim]; classes.len()];
            let mut counts = vec![0usize; classes.len()];
            for s in &ic.train {
                let k = classes.iter().position(|c| c == &s.label_text).unwrap();
                let m = mean_of(s);
                for (a, b) in means[k].iter_mut().zip(&m) {
                    *a += b;
                }
                counts[k] += 1;
            }
            for (m, &c) in means.iter_mut().zip(&counts) {
                for v in m.iter_mut() {
                    *v /= c as f64;
                }
            }
            let mut correct = 0;
            for s in &ic.test {
                let m = mean_of(s);
                let best = (0..classes.len())
                    .min_by(|&a, &b| {
                        let da: f64 = means[a].iter().zip(&m).map(|(x, y)| (x - y) * (x - y)).sum();
                        let db: f64 = means[b].iter().zip(&m).map(|(x, y)| (x - y) * (x - y)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                if classes[best] == s.label_text {
                    correct += 1;
                }
            }
            let acc = correct as f64 / ic.test.len() as f64;
            assert!(
                acc >= 0.99,
                "nearest-class-mean probe reached only {acc} at sigma {sigma}"
            );
        }
    }

    #[test]
    fn manifest_roundtrip_preserves_fields() {
        let dir = std::env::temp_dir().join(format!("speechlm-tasks-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let cfg = TaskGenConfig {
            joint_fraction: 1.0,
            ..small_cfg()
        };
        let suite = generate_suite(&cfg).unwrap();
        let ic = suite.task("ic").unwrap();
        write_manifest(&dir, "ic", "train", &ic.train).unwrap();
        let loaded = load_samples(&dir.join("ic.train.tsv"), &suite.vocab).unwrap();
        assert_eq!(loaded.len(), ic.train.len());
        for (a, b) in ic.train.iter().zip(&loaded) {
            assert_eq!(a.prompt_text, b.prompt_text, "joint prompts embed newlines");
            assert_eq!(a.label_text, b.label_text);
            assert_eq!(a.audio, b.audio);
            assert!(b.joint);
        }
        fs::remove_dir_all(&dir).unwrap();
    }
}
