//! The assembled multimodal model: frozen audio encoder with learnable layer
//! fusion, trainable convolution downsampler, frozen text LM, and optional
//! LoRA adapters. Audio features enter the LM encoder as a prefix in front of
//! the prompt token embeddings.

use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;

use crate::downsample::{self, DownsampleConfig};
use crate::encoder::{self, CombinerMode, EncoderConfig};
use crate::error::{invalid_arg, Error, Result};
use crate::lm::{self, LmConfig, LoraConfig};
use crate::nn::{self, Bound};
use crate::optim::{GradMap, ParamSet};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Training stages, in order. Transitions only move forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CurriculumStage {
    Stage1Align,
    Stage2Warmup,
    Stage2Multitask,
}

impl CurriculumStage {
    pub fn name(self) -> &'static str {
        match self {
            CurriculumStage::Stage1Align => "stage1_align",
            CurriculumStage::Stage2Warmup => "stage2_warmup",
            CurriculumStage::Stage2Multitask => "stage2_multitask",
        }
    }

    pub fn index(self) -> u8 {
        match self {
            CurriculumStage::Stage1Align => 0,
            CurriculumStage::Stage2Warmup => 1,
            CurriculumStage::Stage2Multitask => 2,
        }
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            0 => Ok(CurriculumStage::Stage1Align),
            1 => Ok(CurriculumStage::Stage2Warmup),
            2 => Ok(CurriculumStage::Stage2Multitask),
            _ => Err(Error::InvalidArgument(format!("unknown stage index {i}"))),
        }
    }

    /// Stages before multitask train on transcription data only.
    pub fn asr_only(self) -> bool {
        self != CurriculumStage::Stage2Multitask
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lm: LmConfig,
    pub combiner: CombinerMode,
    pub lora: LoraConfig,
}

impl ModelConfig {
    pub fn downsample_config(&self) -> Result<DownsampleConfig> {
        DownsampleConfig::for_rate(
            self.encoder.frame_rate_hz,
            self.encoder.feature_dim,
            self.lm.d_model,
        )
    }
}

/// Audio prefix followed by prompt token embeddings on one tape. `boundary`
/// is the number of audio frames at the start of the sequence.
#[derive(Debug, Clone, Copy)]
pub struct FusedInput {
    pub seq: TensorId,
    pub boundary: usize,
}

pub struct MultimodalModel {
    pub cfg: ModelConfig,
    pub ds_cfg: DownsampleConfig,
    pub params: ParamSet,
    pub lora_attached: bool,
}

impl MultimodalModel {
    /// Build a fresh model with the initial freeze policy: encoder and LM
    /// base frozen, downsampler and combiner trainable, no adapters yet.
    pub fn new(cfg: ModelConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        let ds_cfg = cfg.downsample_config()?;
        let mut params = ParamSet::new();
        encoder::init_encoder_params(&mut params, &cfg.encoder, cfg.combiner, false, rng)?;
        downsample::init_downsampler_params(&mut params, &ds_cfg, rng)?;
        lm::init_lm_params(&mut params, &cfg.lm, rng)?;
        Ok(MultimodalModel {
            cfg,
            ds_cfg,
            params,
            lora_attached: false,
        })
    }

    /// Add zero-delta adapters on the attention query/value projections.
    pub fn attach_lora(&mut self, rng: &mut ChaCha20Rng) -> Result<()> {
        if self.lora_attached {
            return Err(Error::InvalidState("lora adapters already attached".into()));
        }
        lm::attach_lora_params(&mut self.params, &self.cfg.lm, &self.cfg.lora, rng)?;
        self.lora_attached = true;
        Ok(())
    }

    fn lora_scale(&self) -> f64 {
        if self.lora_attached {
            self.cfg.lora.scale()
        } else {
            0.0
        }
    }

    /// The freeze policy as a name -> trainable map for a given stage:
    /// encoder and LM base always frozen, downsampler and combiner always
    /// trainable, adapters trainable from the warmup stage on.
    pub fn trainable_report(&self, stage: CurriculumStage) -> BTreeMap<String, bool> {
        let lora_on = stage >= CurriculumStage::Stage2Warmup;
        self.params
            .iter()
            .map(|p| {
                let t = if p.name.starts_with("encoder.") || p.name.starts_with("lm.") {
                    false
                } else if p.name.starts_with("lora.") {
                    lora_on
                } else {
                    // ds.* and combiner.*
                    true
                };
                (p.name.clone(), t)
            })
            .collect()
    }

    /// Apply the stage's freeze policy to the parameter set, attaching
    /// adapters when entering the warmup stage for the first time.
    pub fn apply_stage(&mut self, stage: CurriculumStage, rng: &mut ChaCha20Rng) -> Result<()> {
        if stage >= CurriculumStage::Stage2Warmup && !self.lora_attached {
            self.attach_lora(rng)?;
        }
        let report = self.trainable_report(stage);
        for p in self.params.iter_mut() {
            p.trainable = report[&p.name];
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, with_grads: bool) -> Bound {
        nn::bind_params(tape, &self.params, with_grads)
    }

    /// Audio pipeline: encode, combine layers, downsample to the LM width.
    pub fn audio_feats(&self, tape: &mut Tape, bound: &Bound, audio: &Tensor) -> Result<TensorId> {
        let stack = encoder::encode(tape, bound, &self.cfg.encoder, audio, None)?;
        let combined = encoder::combine(tape, bound, self.cfg.combiner, &stack)?;
        downsample::downsample(tape, bound, &self.ds_cfg, combined)
    }

    /// Concatenate downsampled audio features (optional) with prompt token
    /// embeddings. The audio block comes first and no separator is inserted.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        audio_feats: Option<TensorId>,
        prompt: &[usize],
    ) -> Result<FusedInput> {
        let prompt_emb = lm::embed_tokens(tape, bound, &self.cfg.lm, prompt)?;
        match audio_feats {
            None => Ok(FusedInput {
                seq: prompt_emb,
                boundary: 0,
            }),
            Some(a) => {
                let cols = tape.value(a).cols();
                if cols != self.cfg.lm.d_model {
                    invalid_arg!(
                        "audio features have {cols} channels, LM expects {}",
                        self.cfg.lm.d_model
                    );
                }
                let boundary = tape.value(a).rows();
                let seq = tape.concat_rows(&[a, prompt_emb])?;
                Ok(FusedInput { seq, boundary })
            }
        }
    }

    pub fn encode_fused(&self, tape: &mut Tape, bound: &Bound, fused: FusedInput) -> Result<TensorId> {
        lm::lm_encode(tape, bound, &self.cfg.lm, self.lora_scale(), fused.seq)
    }

    pub fn decoder_logits(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        memory: TensorId,
        dec_tokens: &[usize],
    ) -> Result<TensorId> {
        lm::lm_decode_logits(
            tape,
            bound,
            &self.cfg.lm,
            self.lora_scale(),
            memory,
            dec_tokens,
        )
    }

    /// Teacher-forced mean negative log-likelihood of `target` (which must be
    /// non-empty and end with the end-of-sequence id).
    pub fn forward_nll(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        fused: FusedInput,
        target: &[usize],
    ) -> Result<TensorId> {
        if target.is_empty() {
            invalid_arg!("target must be non-empty");
        }
        if *target.last().unwrap() != self.cfg.lm.eos_id {
            invalid_arg!("target must end with the eos id {}", self.cfg.lm.eos_id);
        }
        if target.len() > self.cfg.lm.max_positions {
            invalid_arg!(
                "target length {} exceeds max positions {}",
                target.len(),
                self.cfg.lm.max_positions
            );
        }
        let memory = self.encode_fused(tape, bound, fused)?;
        let mut dec_in = Vec::with_capacity(target.len());
        dec_in.push(self.cfg.lm.bos_id);
        dec_in.extend_from_slice(&target[..target.len() - 1]);
        let logits = self.decoder_logits(tape, bound, memory, &dec_in)?;
        let mask = vec![true; target.len()];
        tape.softmax_cross_entropy(logits, target, &mask)
    }

    /// Forward + fuse convenience used everywhere: audio (optional), prompt
    /// ids, target ids, on a caller-provided tape.
    pub fn sample_nll(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        audio: Option<&Tensor>,
        prompt: &[usize],
        target: &[usize],
    ) -> Result<TensorId> {
        let feats = match audio {
            Some(a) => Some(self.audio_feats(tape, bound, a)?),
            None => None,
        };
        let fused = self.fuse(tape, bound, feats, prompt)?;
        self.forward_nll(tape, bound, fused, target)
    }

    /// Evaluation-only loss for one sample (no gradients).
    pub fn nll(&self, audio: Option<&Tensor>, prompt: &[usize], target: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let loss = self.sample_nll(&mut tape, &bound, audio, prompt, target)?;
        Ok(tape.value(loss).item())
    }

    /// Mean loss and gradients over a batch of samples, all on one tape.
    pub fn batch_loss_and_grads(
        &self,
        batch: &[(&Tensor, &[usize], &[usize])],
    ) -> Result<(f64, GradMap)> {
        if batch.is_empty() {
            invalid_arg!("batch must be non-empty");
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let mut total: Option<TensorId> = None;
        for (audio, prompt, target) in batch {
            let loss = self.sample_nll(&mut tape, &bound, Some(audio), prompt, target)?;
            total = Some(match total {
                None => loss,
                Some(t) => tape.add(t, loss)?,
            });
        }
        let mean = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
        let loss_value = tape.value(mean).item();
        tape.backward(mean)?;
        let grads = nn::collect_grads(&tape, &bound, &self.params);
        Ok((loss_value, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    pub(crate) fn tiny_model_config(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                num_layers: 2,
                feature_dim: 8,
                num_heads: 2,
                raw_dim: 4,
                ..EncoderConfig::default()
            },
            lm: LmConfig {
                d_model: 16,
                enc_layers: 1,
                dec_layers: 1,
                num_heads: 2,
                vocab_size,
                max_positions: 48,
                ..LmConfig::default()
            },
            combiner: CombinerMode::Weighted,
            lora: LoraConfig { rank: 2, alpha: 2.0 },
        }
    }

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn fuse_prefixes_audio_before_text() {
        let cfg = tiny_model_config(20);
        let mut r = rng(1);
        let model = MultimodalModel::new(cfg, &mut r).unwrap();
        let audio = nn::randn(&[12, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let feats = model.audio_feats(&mut tape, &bound, &audio).unwrap();
        let feats_v = tape.value(feats).clone();
        let prompt = [5usize, 6, 7];
        let fused = model.fuse(&mut tape, &bound, Some(feats), &prompt).unwrap();
        // 12 frames at 50 Hz downsample to 3; prompt adds 3 embeddings.
        assert_eq!(fused.boundary, 3);
        let seq = tape.value(fused.seq);
        assert_eq!(seq.shape(), &[6, 16]);
        // The audio block must appear exactly, rows [0, boundary).
        assert_eq!(&seq.data()[..3 * 16], feats_v.data());
    }

    #[test]
    fn fuse_with_no_audio_is_pure_text() {
        let cfg = tiny_model_config(20);
        let mut r = rng(2);
        let model = MultimodalModel::new(cfg, &mut r).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let fused = model.fuse(&mut tape, &bound, None, &[4, 5]).unwrap();
        assert_eq!(fused.boundary, 0);
        assert_eq!(tape.value(fused.seq).rows(), 2);
    }

    #[test]
    fn forward_nll_validates_target() {
        let cfg = tiny_model_config(20);
        let eos = cfg.lm.eos_id;
        let mut r = rng(3);
        let model = MultimodalModel::new(cfg, &mut r).unwrap();
        let audio = nn::randn(&[8, 4], 1.0, &mut r);
        assert!(model.nll(Some(&audio), &[4], &[]).is_err(), "empty target");
        assert!(
            model.nll(Some(&audio), &[4], &[5, 6]).is_err(),
            "target must end with eos"
        );
        assert!(model.nll(Some(&audio), &[4], &[5, eos]).is_ok());
        let long: Vec<usize> = std::iter::repeat(5)
            .take(60)
            .chain(std::iter::once(eos))
            .collect();
        assert!(model.nll(Some(&audio), &[4], &long).is_err(), "too long");
    }

    #[test]
    fn swapping_audio_and_text_blocks_changes_the_loss() {
        let cfg = tiny_model_config(20);
        let mut r = rng(4);
        let model = MultimodalModel::new(cfg, &mut r).unwrap();
        let audio = nn::randn(&[8, 4], 1.0, &mut r);
        let prompt = [7usize, 9, 11];
        let target = [5usize, 6, 2];

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let feats = model.audio_feats(&mut tape, &bound, &audio).unwrap();
        let fused = model.fuse(&mut tape, &bound, Some(feats), &prompt).unwrap();
        let l1 = model.forward_nll(&mut tape, &bound, fused, &target).unwrap();
        let l1 = tape.value(l1).item();

        // Text first, audio second: a different model input.
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let feats = model.audio_feats(&mut tape, &bound, &audio).unwrap();
        let prompt_emb = lm::embed_tokens(&mut tape, &bound, &model.cfg.lm, &prompt).unwrap();
        let swapped = tape.concat_rows(&[prompt_emb, feats]).unwrap();
        let fused = FusedInput {
            seq: swapped,
            boundary: 0,
        };
        let l2 = model.forward_nll(&mut tape, &bound, fused, &target).unwrap();
        let l2 = tape.value(l2).item();
        assert!(
            (l1 - l2).abs() > 1e-9,
            "fusion order must matter: {l1} vs {l2}"
        );
    }

    #[test]
    fn trainable_report_follows_the_freeze_policy() {
        let cfg = tiny_model_config(20);
        let mut r = rng(5);
        let mut model = MultimodalModel::new(cfg, &mut r).unwrap();

        let report = model.trainable_report(CurriculumStage::Stage1Align);
        assert!(report.keys().all(|k| !k.starts_with("lora.")), "no adapters yet");
        assert!(report.iter().all(|(k, &t)| {
            if k.starts_with("encoder.") || k.starts_with("lm.") {
                !t
            } else {
                t
            }
        }));

        model.apply_stage(CurriculumStage::Stage1Align, &mut r).unwrap();
        assert!(!model.lora_attached);
        model.apply_stage(CurriculumStage::Stage2Warmup, &mut r).unwrap();
        assert!(model.lora_attached);
        let report = model.trainable_report(CurriculumStage::Stage2Warmup);
        let lora_entries: Vec<_> = report
            .iter()
            .filter(|(k, _)| k.starts_with("lora."))
            .collect();
        assert!(!lora_entries.is_empty());
        assert!(lora_entries.iter().all(|(_, &t)| t));
        // Adapters appear with B = 0.
        for p in model.params.iter() {
            if p.name.starts_with("lora.") && p.name.ends_with(".b") {
                assert!(p.value.data().iter().all(|&v| v == 0.0));
            }
        }
        // Encoder flags stay false in every stage.
        for stage in [
            CurriculumStage::Stage1Align,
            CurriculumStage::Stage2Warmup,
            CurriculumStage::Stage2Multitask,
        ] {
            let report = model.trainable_report(stage);
            assert!(report
                .iter()
                .filter(|(k, _)| k.starts_with("encoder.") || k.starts_with("lm."))
                .all(|(_, &t)| !t));
        }
    }

    #[test]
    fn zero_init_adapters_do_not_change_the_loss() {
        let cfg = tiny_model_config(20);
        let mut r = rng(6);
        let mut model = MultimodalModel::new(cfg, &mut r).unwrap();
        let audio = nn::randn(&[8, 4], 1.0, &mut r);
        let prompt = [4usize, 5];
        let target = [6usize, 7, 2];
        let before = model.nll(Some(&audio), &prompt, &target).unwrap();
        model.apply_stage(CurriculumStage::Stage2Warmup, &mut r).unwrap();
        let after = model.nll(Some(&audio), &prompt, &target).unwrap();
        assert_eq!(
            before.to_bits(),
            after.to_bits(),
            "attaching zero-init adapters must be bit-neutral"
        );
    }

    #[test]
    fn gradients_reach_exactly_the_trainable_set() {
        let cfg = tiny_model_config(20);
        let mut r = rng(7);
        let mut model = MultimodalModel::new(cfg, &mut r).unwrap();
        model.apply_stage(CurriculumStage::Stage2Warmup, &mut r).unwrap();
        // Give B a nonzero value so gradients flow into A too.
        for p in model.params.iter_mut() {
            if p.name.starts_with("lora.") && p.name.ends_with(".b") {
                let mut rr = rng(8);
                p.value = nn::randn(p.value.shape(), 0.05, &mut rr);
            }
        }
        let audio = nn::randn(&[8, 4], 1.0, &mut r);
        let prompt = [4usize, 5];
        let target: Vec<usize> = vec![6, 7, 2];
        let (loss, grads) = model
            .batch_loss_and_grads(&[(&audio, &prompt[..], &target[..])])
            .unwrap();
        assert!(loss.is_finite());
        for p in model.params.iter() {
            if p.trainable {
                let g = grads.get(&p.name).expect("trainable grad present");
                assert!(
                    g.data().iter().any(|&v| v != 0.0),
                    "{} should receive gradient",
                    p.name
                );
            } else {
                assert!(!grads.contains_key(&p.name), "{} is frozen", p.name);
            }
        }
    }

    #[test]
    fn deterministic_loss_for_fixed_seed() {
        let mut r1 = rng(9);
        let m1 = MultimodalModel::new(tiny_model_config(20), &mut r1).unwrap();
        let mut r2 = rng(9);
        let m2 = MultimodalModel::new(tiny_model_config(20), &mut r2).unwrap();
        let mut ra = rng(10);
        let audio = nn::randn(&[8, 4], 1.0, &mut ra);
        let prompt = [4usize];
        let target = [5usize, 2];
        let a = m1.nll(Some(&audio), &prompt, &target).unwrap();
        let b = m2.nll(Some(&audio), &prompt, &target).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let _ = ra.gen::<f64>();
    }
}
