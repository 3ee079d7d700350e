use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bridge::FeatureBridge;
use super::config::{DecodeStrategy, PipelineConfig, Toggles, VARIANTS};
use super::data::{
    load_inference_data, load_training_data, toy_inference_data, toy_training_data, write_captions,
    CaptionOutput, InferenceData, TrainingData,
};
use crate::checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, SupportRef,
};
use crate::corpus::{tokenize, Vocabulary};
use crate::decoder::{beam_search, greedy_decode, train_decoder, DecoderModel, TrainingExample};
use crate::embedding::{load_embeddings, save_embeddings, EmbeddingMatrix};
use crate::encoder::ObjectEncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalPair, MetricReport};
use crate::projection::SupportSet;
use crate::refine::{
    mean_paired_cosine, refine_features, write_loss_history, EpochLoss, RefineOutcome,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub variant: String,
    pub toggles: Toggles,
    pub n_items: usize,
    /// Input rows skipped: all-zero features or captions without tokens.
    pub dropped_rows: Vec<usize>,
    /// Captions cut to fit the decoder's positional table.
    pub truncated_captions: usize,
    /// Mean `cos(s_i, t_i)` before and after refinement (equal when off).
    pub cosine_before: f64,
    pub cosine_after: f64,
    pub refine_history: Vec<EpochLoss>,
    pub loss_history: Vec<EpochLoss>,
    pub vocab_size: usize,
    pub parameters: usize,
}

pub struct TrainedPipeline {
    pub checkpoint: Checkpoint,
    pub report: TrainingReport,
    /// Features the decoder prefixes were built from (refined when FO is on).
    pub features: EmbeddingMatrix,
}

/// A trained decoder plus the bridge that turns image features into prefixes.
pub struct Captioner {
    model: DecoderModel,
    vocab: Vocabulary,
    bridge: FeatureBridge,
    decode: DecodeStrategy,
}

fn object_encoder_config(cfg: &PipelineConfig, dim: usize) -> ObjectEncoderConfig {
    match (&cfg.paths.tag_features, &cfg.paths.tag_names) {
        (Some(features), Some(names)) if !cfg.toy.enabled => ObjectEncoderConfig::Table {
            features: features.clone(),
            names: names.clone(),
        },
        _ => ObjectEncoderConfig::Toy(crate::toy_encoder::ToyEncoderSpec {
            dim,
            ..cfg.toy.encoder
        }),
    }
}

fn build_bridge(
    dim: usize,
    toggles: Toggles,
    support: Option<&EmbeddingMatrix>,
    projection: crate::projection::ProjectionConfig,
    objects: &ObjectEncoderConfig,
) -> Result<FeatureBridge> {
    let support = match (toggles.fp, support) {
        (true, Some(m)) => Some(SupportSet::new(m, projection)?),
        (true, None) => {
            return Err(Error::Config(
                "projection is on but no support set is available".into(),
            ))
        }
        (false, _) => None,
    };
    let encoder = if toggles.af {
        Some(objects.build()?)
    } else {
        None
    };
    FeatureBridge::new(dim, toggles, support, encoder)
}

impl Captioner {
    pub fn new(
        model: DecoderModel,
        vocab: Vocabulary,
        bridge: FeatureBridge,
        decode: DecodeStrategy,
    ) -> Result<Self> {
        if model.shape.feature_dim != bridge.dim() {
            return Err(Error::ShapeMismatch(format!(
                "model expects dim {}, bridge produces {}",
                model.shape.feature_dim,
                bridge.dim()
            )));
        }
        if model.shape.vocab_size != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "model vocabulary {} vs {} tokens",
                model.shape.vocab_size,
                vocab.len()
            )));
        }
        Ok(Self {
            model,
            vocab,
            bridge,
            decode,
        })
    }

    /// Rebuilds the inference path recorded in `ckpt`. When `support` is
    /// given it replaces the recorded support set, e.g. to project onto
    /// captions from a different domain.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        support: Option<&Path>,
        decode: DecodeStrategy,
    ) -> Result<Self> {
        let h = &ckpt.header;
        let vocab = Vocabulary::from_tokens(h.vocab.clone())?;
        let matrix = if h.toggles.fp {
            let recorded = h
                .support
                .as_ref()
                .ok_or_else(|| Error::Checkpoint("no support set recorded".into()))?;
            let m = load_embeddings(support.unwrap_or(&recorded.path))?;
            if support.is_none() && !recorded.matches(&m) {
                return Err(Error::Checkpoint(format!(
                    "support set at {} no longer matches the checkpoint",
                    recorded.path.display()
                )));
            }
            Some(m)
        } else {
            None
        };
        let bridge = build_bridge(
            h.shape.feature_dim,
            h.toggles,
            matrix.as_ref(),
            h.projection,
            &h.object_encoder,
        )?;
        Self::new(ckpt.model.clone(), vocab, bridge, decode)
    }

    pub fn model(&self) -> &DecoderModel {
        &self.model
    }

    pub fn bridge(&self) -> &FeatureBridge {
        &self.bridge
    }

    pub fn caption(&self, feature: &[f64], objects: &[String]) -> Result<String> {
        let prefix = self.bridge.prefix(feature, objects)?;
        let ids = match self.decode {
            DecodeStrategy::Greedy => greedy_decode(&self.model, &prefix)?,
            DecodeStrategy::Beam { width } => beam_search(&self.model, &prefix, width)?,
        };
        Ok(self.vocab.decode(&ids).join(" "))
    }

    pub fn caption_all(&self, data: &InferenceData) -> Result<Vec<CaptionOutput>> {
        if data.features.dim() != self.bridge.dim() {
            return Err(Error::ShapeMismatch(format!(
                "image features have dim {}, checkpoint expects {}",
                data.features.dim(),
                self.bridge.dim()
            )));
        }
        (0..data.len())
            .map(|i| {
                Ok(CaptionOutput {
                    id: data.ids[i].clone(),
                    caption: self.caption(&data.features.row_f64(i), &data.objects[i])?,
                })
            })
            .collect()
    }
}

fn refine_stage(cfg: &PipelineConfig, data: &TrainingData) -> Result<RefineOutcome> {
    refine_features(&data.pseudo, &data.text, &cfg.refine_config())
}

/// Trains one variant on `data`. `support` is the text support set and
/// `refined` an already computed refinement of `data.pseudo`, reused across
/// variants when given.
pub fn train_in_memory(
    cfg: &PipelineConfig,
    data: &TrainingData,
    support: &EmbeddingMatrix,
    support_path: &Path,
    refined: Option<&RefineOutcome>,
) -> Result<TrainedPipeline> {
    cfg.validate()?;
    let toggles = cfg.toggles;
    let dim = data.dim();
    if support.dim() != dim {
        return Err(Error::ShapeMismatch(format!(
            "support dim {} vs feature dim {dim}",
            support.dim()
        )));
    }
    let cosine_before = mean_paired_cosine(&data.pseudo, &data.text)?;
    let computed;
    let refined = match (toggles.fo, refined) {
        (false, _) => None,
        (true, Some(r)) => Some(r),
        (true, None) => {
            computed = refine_stage(cfg, data)?;
            Some(&computed)
        }
    };
    let features = refined.map_or_else(|| data.pseudo.clone(), |r| r.features.clone());
    let cosine_after = mean_paired_cosine(&features, &data.text)?;

    let objects = object_encoder_config(cfg, dim);
    let bridge = build_bridge(dim, toggles, Some(support), cfg.projection(), &objects)?;
    let vocab = Vocabulary::build(&data.records, cfg.min_freq)?;
    let dcfg = cfg.decoder_config();
    let mut truncated = 0;
    let examples = data
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let prefix = bridge.prefix(&features.row_f64(i), &r.objects)?;
            let room = dcfg.max_len.saturating_sub(prefix.len() + 1);
            let words = if r.tokens.len() > room {
                truncated += 1;
                &r.tokens[..room]
            } else {
                &r.tokens[..]
            };
            Ok(TrainingExample {
                prefix,
                caption: vocab.encode_caption(words),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed());
    let mut model = DecoderModel::new(&dcfg, vocab.len(), dim, &mut rng)?;
    let loss_history = train_decoder(&mut model, &examples, &dcfg)?;

    let report = TrainingReport {
        variant: toggles.name().to_string(),
        toggles,
        n_items: data.len(),
        dropped_rows: Vec::new(),
        truncated_captions: truncated,
        cosine_before,
        cosine_after,
        refine_history: refined.map(|r| r.history.clone()).unwrap_or_default(),
        loss_history,
        vocab_size: vocab.len(),
        parameters: model.parameter_count(),
    };
    let header = CheckpointHeader {
        decoder: dcfg,
        shape: model.shape,
        vocab: vocab.tokens().to_vec(),
        toggles,
        projection: cfg.projection(),
        support: toggles
            .fp
            .then(|| SupportRef::describe(support_path, support)),
        object_encoder: objects,
        config: serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?,
    };
    Ok(TrainedPipeline {
        checkpoint: Checkpoint { header, model },
        report,
        features,
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn prepare_training(cfg: &PipelineConfig) -> Result<(TrainingData, Vec<usize>)> {
    cfg.validate()?;
    let mut data = if cfg.toy.enabled {
        toy_training_data(&cfg.toy)?
    } else {
        load_training_data(&cfg.paths)?
    };
    let dropped = data.drop_unusable_rows()?;
    Ok((data, dropped))
}

/// Support set and the path recorded for it. In toy mode, or whenever the
/// support set exists only in memory, it is written next to the checkpoint.
fn resolve_support(
    cfg: &PipelineConfig,
    data: &TrainingData,
) -> Result<(EmbeddingMatrix, PathBuf)> {
    if let Some(p) = &cfg.paths.support {
        return Ok((load_embeddings(p)?, p.clone()));
    }
    if let (false, Some(p)) = (cfg.toy.enabled, &cfg.paths.text_embeddings) {
        return Ok((data.text.clone(), p.clone()));
    }
    let path = match &cfg.paths.checkpoint {
        Some(c) => {
            let p = c.with_extension("support.syne");
            save_embeddings(&data.text, &p)?;
            p
        }
        None => PathBuf::from("<memory>"),
    };
    Ok((data.text.clone(), path))
}

/// Training stage: refine, project, fuse, train the decoder, and write the
/// checkpoint and reports to the configured paths.
pub fn run_training(cfg: &PipelineConfig) -> Result<TrainedPipeline> {
    let (data, dropped) = prepare_training(cfg)?;
    let (support, support_path) = resolve_support(cfg, &data)?;
    let mut trained = train_in_memory(cfg, &data, &support, &support_path, None)?;
    trained.report.dropped_rows = dropped;
    if let Some(p) = &cfg.paths.checkpoint {
        save_checkpoint(&trained.checkpoint, p)?;
    }
    if let Some(dir) = &cfg.paths.report_dir {
        fs::create_dir_all(dir)?;
        write_json(&trained.report, &dir.join("training_report.json"))?;
        write_loss_history(
            &trained.report.loss_history,
            fs::File::create(dir.join("decoder_loss.jsonl"))?,
        )?;
        if cfg.toggles.fo {
            write_loss_history(
                &trained.report.refine_history,
                fs::File::create(dir.join("refine_loss.jsonl"))?,
            )?;
        }
    }
    Ok(trained)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutcome {
    pub captions: Vec<CaptionOutput>,
    pub metrics: Option<MetricReport>,
    /// Share of images whose caption names one of their object tags.
    pub object_hit_rate: Option<f64>,
}

fn score(
    captions: &[CaptionOutput],
    data: &InferenceData,
) -> Result<(Option<MetricReport>, Option<f64>)> {
    let metrics = if data.has_references() {
        let pairs: Vec<EvalPair> = captions
            .iter()
            .zip(&data.references)
            .map(|(c, refs)| {
                EvalPair::new(
                    tokenize(&c.caption),
                    refs.iter().map(|r| tokenize(r)).collect(),
                )
            })
            .collect();
        Some(evaluate(&pairs)?)
    } else {
        None
    };
    let tagged: Vec<(&CaptionOutput, &Vec<String>)> = captions
        .iter()
        .zip(&data.objects)
        .filter(|(_, o)| !o.is_empty())
        .collect();
    let hit_rate = (!tagged.is_empty()).then(|| {
        let hits = tagged
            .iter()
            .filter(|(c, objs)| {
                let words = tokenize(&c.caption);
                objs.iter().any(|o| words.iter().any(|w| w == o))
            })
            .count();
        hits as f64 / tagged.len() as f64
    });
    Ok((metrics, hit_rate))
}

/// Pairs candidate captions with references by id and scores them.
pub fn score_captions(
    captions: &[CaptionOutput],
    references: &HashMap<String, Vec<String>>,
) -> Result<MetricReport> {
    let pairs = captions
        .iter()
        .map(|c| {
            let refs = references
                .get(&c.id)
                .filter(|r| !r.is_empty())
                .ok_or_else(|| Error::Config(format!("no references for caption {:?}", c.id)))?;
            Ok(EvalPair::new(
                tokenize(&c.caption),
                refs.iter().map(|r| tokenize(r)).collect(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&pairs)
}

fn inference_data(cfg: &PipelineConfig) -> Result<InferenceData> {
    if cfg.toy.enabled {
        toy_inference_data(&cfg.toy)
    } else {
        load_inference_data(&cfg.paths)
    }
}

/// Inference stage: caption every image with the configured checkpoint.
/// Features are projected and fused exactly as in training; they are never
/// refined.
pub fn run_inference(cfg: &PipelineConfig) -> Result<InferenceOutcome> {
    cfg.validate()?;
    let path = cfg
        .paths
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("missing path: checkpoint".into()))?;
    let ckpt = load_checkpoint(path)?;
    // A support path that differs from the recorded one is an explicit swap.
    let recorded = ckpt.header.support.as_ref().map(|s| s.path.clone());
    let swap = cfg
        .paths
        .support
        .as_deref()
        .filter(|p| Some(p.to_path_buf()) != recorded);
    let captioner = Captioner::from_checkpoint(&ckpt, swap, cfg.decode)?;
    let data = inference_data(cfg)?;
    let captions = captioner.caption_all(&data)?;
    let (metrics, object_hit_rate) = score(&captions, &data)?;
    if let Some(p) = &cfg.paths.captions {
        write_captions(&captions, p)?;
    }
    let outcome = InferenceOutcome {
        captions,
        metrics,
        object_hit_rate,
    };
    if let Some(dir) = &cfg.paths.report_dir {
        fs::create_dir_all(dir)?;
        write_json(&outcome, &dir.join("inference_report.json"))?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub toggles: Toggles,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub object_hit_rate: Option<f64>,
    pub final_loss: f64,
    pub cosine_before: f64,
    pub cosine_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub n_train: usize,
    pub n_test: usize,
    pub variants: Vec<VariantResult>,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }
}

/// Trains and evaluates all eight toggle combinations on shared data. The
/// refinement is computed once and reused by every variant that uses it.
pub fn run_ablation(
    cfg: &PipelineConfig,
    mut on_variant: impl FnMut(&VariantResult),
) -> Result<AblationReport> {
    let (data, _) = prepare_training(cfg)?;
    let (support, support_path) = resolve_support(cfg, &data)?;
    let test = inference_data(cfg)?;
    if !test.has_references() {
        return Err(Error::Config(
            "ablation needs reference captions for every inference image".into(),
        ));
    }
    let refined = refine_stage(cfg, &data)?;
    let mut variants = Vec::with_capacity(VARIANTS.len());
    for toggles in VARIANTS {
        let vcfg = PipelineConfig {
            toggles,
            ..cfg.clone()
        };
        let trained = train_in_memory(&vcfg, &data, &support, &support_path, Some(&refined))?;
        let h = &trained.checkpoint.header;
        let bridge = build_bridge(
            data.dim(),
            toggles,
            Some(&support),
            h.projection,
            &h.object_encoder,
        )?;
        let vocab = Vocabulary::from_tokens(h.vocab.clone())?;
        let captioner = Captioner::new(trained.checkpoint.model, vocab, bridge, cfg.decode)?;
        let captions = captioner.caption_all(&test)?;
        let (metrics, object_hit_rate) = score(&captions, &test)?;
        let m = metrics.expect("references checked above");
        let result = VariantResult {
            name: toggles.name().to_string(),
            toggles,
            bleu4: m.bleu4,
            rouge_l: m.rouge_l,
            cider_d: m.cider_d,
            object_hit_rate,
            final_loss: trained
                .report
                .loss_history
                .last()
                .map_or(f64::NAN, |e| e.mean_loss),
            cosine_before: trained.report.cosine_before,
            cosine_after: trained.report.cosine_after,
        };
        on_variant(&result);
        variants.push(result);
    }
    let report = AblationReport {
        n_train: data.len(),
        n_test: test.len(),
        variants,
    };
    if let Some(dir) = &cfg.paths.report_dir {
        fs::create_dir_all(dir)?;
        write_json(&report, &dir.join("ablation.json"))?;
    }
    Ok(report)
}
