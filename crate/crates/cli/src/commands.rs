//! Subcommand implementations.

use anyhow::{bail, Context, Result};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use polystain::evalkit::{
    evaluate_generated, generate_all, multiplex_scores, render_comparison, train_gland_segmenter, EvalContext,
    GroundTruth, InputKind, MetricsReport, MultiplexScores, Protocol, SegModel, StainerGenerator, TileGenerator,
};
use polystain::image::{load_tile, save_tile};
use polystain::nn::mix_seed;
use polystain::stainer::{pretrain_base, ModelConfig, StainerState};
use polystain::synthdata::{
    build_prompt, generate_dataset, load_dataset, manifest_checksum, write_dataset, Marker, Polarity, PromptMode,
};
use polystain::training::{checkpoint_train_config, pretrain_pair_encoder, train_loop, PairEncoder, TrainMode};

use crate::config::RunConfig;
use crate::{Command, Common, ConfigError};

pub const ENCODER_FILE: &str = "encoder.safetensors";
pub const BASE_FILE: &str = "base.safetensors";
pub const STAIN_SEGMENTER: &str = "segmenter_stain.safetensors";
pub const INPUT_SEGMENTER: &str = "segmenter_input.safetensors";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const MULTIPLEX_JSON: &str = "multiplex.json";

// Independent random streams derived from the run seed.
const STREAM_TRAIN_DATA: u64 = 1;
const STREAM_TEST_DATA: u64 = 2;
const STREAM_ENCODER: u64 = 3;
const STREAM_BASE: u64 = 4;
const STREAM_LORA: u64 = 5;
const STREAM_INFER: u64 = 6;

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn resolve(cfg: RunConfig) -> Result<RunConfig> {
    Ok(cfg.resolve()?)
}

fn out_dir(cfg: &RunConfig, flag: Option<PathBuf>, default: &str) -> PathBuf {
    flag.unwrap_or_else(|| cfg.out_root.join(default))
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            common,
            out,
            train_count,
            test_count,
            negative_fraction,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = train_count {
                cfg.data.train_count = n;
            }
            if let Some(n) = test_count {
                cfg.data.test_count = n;
            }
            if let Some(f) = negative_fraction {
                cfg.data.tissue.negative_fraction = f;
            }
            let cfg = resolve(cfg)?;
            gen_data(&cfg, &out_dir(&cfg, out, "data"))
        }
        Command::PretrainEncoder {
            common,
            data,
            out,
            steps,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = steps {
                cfg.pair.steps = s;
            }
            let cfg = resolve(cfg)?;
            let out = out.unwrap_or_else(|| cfg.out_root.join("encoder").join(ENCODER_FILE));
            pretrain_encoder(&cfg, &data, &out)
        }
        Command::Train {
            common,
            data,
            encoder,
            base,
            out,
            steps,
            prompt_mode,
            batch_size,
            lr_generator,
            checkpoint_every,
            allow_unvalidated,
        } => {
            let mut cfg = load_config(&common)?;
            let t = &mut cfg.train;
            if let Some(s) = steps {
                t.total_steps = s;
            }
            if let Some(m) = prompt_mode {
                t.prompt_mode = m;
            }
            if let Some(b) = batch_size {
                t.batch_size = b;
            }
            if let Some(lr) = lr_generator {
                t.lr_generator = lr;
            }
            if let Some(c) = checkpoint_every {
                t.checkpoint_every = c;
            }
            t.allow_unvalidated |= allow_unvalidated;
            let cfg = resolve(cfg)?;
            let out = out_dir(&cfg, out, "train");
            train(&cfg, &data, encoder.as_deref(), base.as_deref(), &out)
        }
        Command::Infer {
            common,
            checkpoint,
            inputs,
            marker,
            prompt_text,
            allow_freeform,
            out,
        } => {
            let cfg = resolve(load_config(&common)?)?;
            let out = out_dir(&cfg, out, "infer");
            let req = InferRequest {
                marker,
                prompt_text,
                allow_freeform,
            };
            infer(&cfg, &checkpoint, &inputs, &req, &out)
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            protocol,
            ground_truth,
            encoder,
            segmenters,
            segmenter_data,
            out,
        } => {
            let cfg = resolve(load_config(&common)?)?;
            let protocol = Protocol::from_str(&protocol).map_err(|e| ConfigError(e.to_string()))?;
            let source = match (checkpoint, ground_truth) {
                (Some(_), true) => bail!(ConfigError("pass either --checkpoint or --ground-truth".into())),
                (Some(c), false) => Source::Checkpoint(c),
                (None, _) => Source::GroundTruth(
                    encoder.ok_or_else(|| ConfigError("--ground-truth needs --encoder for image features".into()))?,
                ),
            };
            let seg_dir = segmenters.unwrap_or_else(|| cfg.out_root.join("segmenters"));
            let seg_data = segmenter_data.unwrap_or_else(|| data.clone());
            let out = out_dir(&cfg, out, "eval");
            eval(&cfg, &source, &data, protocol, &seg_dir, &seg_data, &out)
        }
        Command::Report { common, reports, out } => {
            let cfg = resolve(load_config(&common)?)?;
            let out = out_dir(&cfg, out, "report");
            report(&cfg, &reports, &out)
        }
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = &cfg.data.tissue;
    for (split, count, stream) in [
        ("train", cfg.data.train_count, STREAM_TRAIN_DATA),
        ("test", cfg.data.test_count, STREAM_TEST_DATA),
    ] {
        let records = generate_dataset(spec, count, mix_seed(cfg.seed, stream))?;
        let dir = out.join(split);
        let manifest = write_dataset(&records, spec, &dir)?;
        let neg = manifest.negative_count();
        println!(
            "{split}: {} tiles ({} positive, {neg} negative), checksum {}",
            records.len(),
            records.len() - neg,
            manifest_checksum(&dir)?
        );
    }
    cfg.write_snapshot(out)?;
    Ok(())
}

fn pretrain_encoder(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let records = load_dataset(data)?;
    let enc = pretrain_pair_encoder(&records, &cfg.pair, mix_seed(cfg.seed, STREAM_ENCODER))?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    enc.save(out)?;
    cfg.write_snapshot(dir)?;
    match enc.meta().retrieval_accuracy {
        Some(acc) => println!(
            "encoder saved to {} (held-out retrieval {acc:.3}, {})",
            out.display(),
            if enc.is_validated() { "validated" } else { "below the validation gate" }
        ),
        None => println!("encoder saved to {} (not validated)", out.display()),
    }
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, encoder: Option<&Path>, base: Option<&Path>, out: &Path) -> Result<()> {
    let records = load_dataset(data)?;
    fs::create_dir_all(out)?;
    cfg.write_snapshot(out)?;
    let (model, base_params, pair) = match base {
        Some(path) => {
            let (prev, _) = StainerState::load(path).with_context(|| format!("loading base {}", path.display()))?;
            if encoder.is_some() {
                log::warn!("--encoder ignored: the base checkpoint carries the encoder it was pretrained with");
            }
            let model = ModelConfig {
                lora_rank: cfg.model.lora_rank,
                lora_alpha: cfg.model.lora_alpha,
                lora_targets: cfg.model.lora_targets.clone(),
                ..prev.config().clone()
            };
            (model, prev.base().clone(), prev.text_encoder().clone())
        }
        None => {
            let pair = match encoder {
                Some(p) => PairEncoder::load(p).with_context(|| format!("loading encoder {}", p.display()))?,
                None => {
                    log::warn!("no --encoder given; pretraining one on the training split");
                    let enc = pretrain_pair_encoder(&records, &cfg.pair, mix_seed(cfg.seed, STREAM_ENCODER))?;
                    enc.save(&out.join(ENCODER_FILE))?;
                    enc
                }
            };
            log::info!("pretraining the frozen base");
            let base = pretrain_base(&records, &pair, &cfg.model, &cfg.base, mix_seed(cfg.seed, STREAM_BASE))?;
            let state = StainerState::new(cfg.model.clone(), base, pair)?;
            state.save(&out.join(BASE_FILE), Vec::new(), serde_json::Value::Null)?;
            (cfg.model.clone(), state.base().clone(), state.text_encoder().clone())
        }
    };
    let state = StainerState::new(model.clone(), base_params, pair)?.apply_lora(&model, mix_seed(cfg.seed, STREAM_LORA))?;
    let outcome = train_loop(
        &records,
        &state,
        &cfg.train,
        out,
        serde_json::json!({ "seed": cfg.seed, "data": data }),
    )?;
    let last = outcome.losses.last().map(|b| b.total).unwrap_or(f64::NAN);
    println!(
        "trained {} steps in {} mode; final total loss {last:.4}; checkpoint {}",
        outcome.checkpoint.step,
        outcome.checkpoint.prompt_mode,
        outcome.checkpoint.path.display()
    );
    Ok(())
}

struct InferRequest {
    marker: String,
    prompt_text: Option<String>,
    allow_freeform: bool,
}

enum Query {
    Marker(Marker),
    Text(String, String),
}

fn default_prompt_mode(cfg: &RunConfig, meta: &serde_json::Value) -> PromptMode {
    cfg.eval.prompt_mode.unwrap_or_else(|| {
        checkpoint_train_config(meta)
            .map(|t| t.prompt_mode.eval_prompt_mode())
            .unwrap_or(PromptMode::SP)
    })
}

fn infer(cfg: &RunConfig, checkpoint: &Path, inputs: &[PathBuf], req: &InferRequest, out: &Path) -> Result<()> {
    let queries: Vec<Query> = if let Some(text) = &req.prompt_text {
        let label = match Marker::from_str(&req.marker) {
            Ok(m) => m.as_str().to_string(),
            Err(_) => "CUSTOM".to_string(),
        };
        vec![Query::Text(label, text.clone())]
    } else if req.marker.eq_ignore_ascii_case("all") {
        Marker::ALL.iter().map(|&m| Query::Marker(m)).collect()
    } else {
        match Marker::from_str(&req.marker) {
            Ok(m) => vec![Query::Marker(m)],
            Err(_) if req.allow_freeform => vec![Query::Text("CUSTOM".into(), req.marker.clone())],
            Err(e) => return Err(e.into()),
        }
    };
    let (state, container) = StainerState::load(checkpoint)?;
    let mode = default_prompt_mode(cfg, &container.meta);
    fs::create_dir_all(out)?;
    cfg.write_snapshot(out)?;
    let seed = mix_seed(cfg.seed, STREAM_INFER);
    for input in inputs {
        let tile = load_tile(input).with_context(|| format!("reading {}", input.display()))?;
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "tile".into());
        for q in &queries {
            let (label, stained) = match q {
                Query::Marker(m) => {
                    let p = build_prompt(*m, mode, Polarity::Positive)?;
                    (m.as_str().to_string(), state.virtual_stain(&tile, &p, seed)?)
                }
                Query::Text(label, text) => (label.clone(), state.stain_text(&tile, text, seed)?),
            };
            let path = out.join(format!("{stem}_{label}.png"));
            save_tile(&stained, &path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

enum Source {
    Checkpoint(PathBuf),
    GroundTruth(PathBuf),
}

fn segmenter(dir: &Path, file: &str, kind: InputKind, cfg: &RunConfig, seg_data: &Path) -> Result<SegModel> {
    let path = dir.join(file);
    if path.exists() {
        let m = SegModel::load(&path)?;
        if m.input_kind() != kind {
            bail!(ConfigError(format!("{} holds a segmenter of the wrong kind", path.display())));
        }
        return Ok(m);
    }
    log::info!("training the {kind:?} gland segmenter on {}", seg_data.display());
    let records = load_dataset(seg_data)?;
    let m = train_gland_segmenter(&records, kind, &cfg.eval.segmenter)?;
    if let Some(d) = m.meta().held_out_dice {
        log::info!("{kind:?} segmenter held-out DICE {d:.3}");
    }
    fs::create_dir_all(dir)?;
    m.save(&path)?;
    Ok(m)
}

fn eval(
    cfg: &RunConfig,
    source: &Source,
    data: &Path,
    protocol: Protocol,
    seg_dir: &Path,
    seg_data: &Path,
    out: &Path,
) -> Result<()> {
    let records = load_dataset(data)?;
    let stain_seg = segmenter(seg_dir, STAIN_SEGMENTER, InputKind::Stain, cfg, seg_data)?;
    let input_seg = match protocol {
        Protocol::Unpaired => Some(segmenter(seg_dir, INPUT_SEGMENTER, InputKind::InputHe, cfg, seg_data)?),
        Protocol::Paired => None,
    };
    let loaded;
    let encoder;
    let (features, generated, id, train_mode): (&PairEncoder, _, String, Option<TrainMode>) = match source {
        Source::Checkpoint(path) => {
            loaded = StainerState::load(path)?;
            let (state, container) = &loaded;
            let train_mode = checkpoint_train_config(&container.meta).map(|t| t.prompt_mode);
            let id = match train_mode {
                Some(m) => m.to_string(),
                None => path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            };
            let gen = StainerGenerator {
                state,
                mode: default_prompt_mode(cfg, &container.meta),
                seed: cfg.seed,
                id: id.clone(),
            };
            let g = generate_all(&gen, &records, &Marker::ALL)?;
            (state.text_encoder(), g, id, train_mode)
        }
        Source::GroundTruth(enc) => {
            encoder = PairEncoder::load(enc)?;
            let g = generate_all(&GroundTruth, &records, &Marker::ALL)?;
            (&encoder, g, GroundTruth.id(), None)
        }
    };
    let ctx = EvalContext {
        stain_segmenter: &stain_seg,
        input_segmenter: input_seg.as_ref(),
        features,
        matrix: cfg.eval.matrix()?,
        dab_threshold: cfg.eval.dab_threshold,
    };
    let report = evaluate_generated(&id, &records, &generated, protocol, &ctx)?;
    fs::create_dir_all(out)?;
    cfg.write_snapshot(out)?;
    report.write_json(&out.join(REPORT_JSON))?;
    report.write_csv(&out.join(REPORT_CSV))?;
    if protocol == Protocol::Paired {
        let scores = multiplex_scores(&records, &generated, &ctx.matrix, ctx.dab_threshold)?;
        let doc = MultiplexDoc {
            model_id: id.clone(),
            train_mode,
            scores,
        };
        fs::write(out.join(MULTIPLEX_JSON), serde_json::to_string_pretty(&doc)?)?;
    }
    for (m, v) in &report.markers {
        println!(
            "{id} {m}: seg DICE {:.3}, IoU {:.3}, Hausdorff {:.2}",
            v.seg_dice, v.seg_iou, v.seg_hausdorff
        );
    }
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct MultiplexDoc {
    model_id: String,
    train_mode: Option<TrainMode>,
    scores: MultiplexScores,
}

fn multiplex_section(docs: &[MultiplexDoc]) -> String {
    let mut s = String::from("\n## Compartment specificity\n\n");
    s.push_str("| model | marker | matched DICE | cross DICE | margin | negative-tile DAB fraction |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for d in docs {
        for m in Marker::ALL {
            let get = |map: &BTreeMap<Marker, f64>| map.get(&m).map_or("-".to_string(), |v| format!("{v:.4}"));
            let margin = match (d.scores.matched_dice.get(&m), d.scores.cross_dice.get(&m)) {
                (Some(a), Some(b)) => format!("{:.4}", a - b),
                _ => "-".into(),
            };
            s.push_str(&format!(
                "| {} | {m} | {} | {} | {margin} | {} |\n",
                d.model_id,
                get(&d.scores.matched_dice),
                get(&d.scores.cross_dice),
                get(&d.scores.negative_fraction)
            ));
        }
    }
    let by_mode = |mode: TrainMode| docs.iter().find(|d| d.train_mode == Some(mode));
    if let (Some(a), Some(b)) = (by_mode(TrainMode::SMPP), by_mode(TrainMode::SMP)) {
        s.push_str(&format!(
            "\nFalse-positive DAB on negative tiles: SMPP {:.4}, SMP {:.4}.\n",
            a.scores.mean_negative_fraction(),
            b.scores.mean_negative_fraction()
        ));
    }
    s
}

fn report(cfg: &RunConfig, paths: &[PathBuf], out: &Path) -> Result<()> {
    let mut reports = Vec::with_capacity(paths.len());
    let mut docs = Vec::new();
    for p in paths {
        let path = if p.is_dir() { p.join(REPORT_JSON) } else { p.clone() };
        reports.push(MetricsReport::read_json(&path).with_context(|| format!("reading {}", path.display()))?);
        let sibling = path.with_file_name(MULTIPLEX_JSON);
        if sibling.exists() {
            let text = fs::read_to_string(&sibling)?;
            docs.push(serde_json::from_str::<MultiplexDoc>(&text).with_context(|| format!("parsing {}", sibling.display()))?);
        }
    }
    fs::create_dir_all(out)?;
    cfg.write_snapshot(out)?;
    let written = render_comparison(&reports, out)?;
    if !docs.is_empty() {
        let table = out.join("comparison.md");
        let mut text = fs::read_to_string(&table)?;
        text.push_str(&multiplex_section(&docs));
        fs::write(&table, text)?;
    }
    for w in written {
        println!("{}", w.display());
    }
    Ok(())
}
