//! One function per subcommand. Each reads and writes only paths below the
//! run root and returns a JSON summary for stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use volrep_core::abnormality::inject_findings;
use volrep_core::dataset::{build_dataset, DatasetOptions, PhantomRef, SampleRecord, Split, Task};
use volrep_core::io::{atomic_write, read_jsonl, read_volume, write_json, write_lobes, write_volume, Provenance};
use volrep_core::metrics::multilabel_pr_auc;
use volrep_core::phantom::generate_phantom;
use volrep_core::report::{render_report, TemplateLibrary, Vocabulary};
use volrep_core::sarle::{bundled_corpus, evaluate_corpus, label_report};
use volrep_nn::checkpoint;
use volrep_nn::decoder::{Decoder, DecoderConfig, Memory, MemoryKind, StopReason, ARCHITECTURE as DECODER};
use volrep_nn::encoder::{Encoder, EncoderInput, EncoderSample, ARCHITECTURE as ENCODER};
use volrep_nn::eval::{
    encoder_metrics, factual_accuracy, generate_all, generated_report, next_word_accuracy, predict_all,
};
use volrep_nn::search::{hyperparameter_search, Dynamics, SearchResult, Trial};
use volrep_nn::train::{train, DecoderSample, TrainConfig, TrainOutcome};

use crate::config::representation_name;
use crate::error::{Error, Result};
use crate::history::{self, CsvKind};
use crate::plot::{self, Series};
use crate::workspace::{file_sha256, of_split, GeneratedRecord, PhantomRecord, ReportRecord, Workspace};

/// Progress line on stderr.
pub fn log(event: &str, fields: Value) {
    let mut line = json!({ "event": event });
    if let (Some(obj), Value::Object(extra)) = (line.as_object_mut(), fields) {
        obj.extend(extra);
    }
    eprintln!("{line}");
}

pub fn phantom_gen(ws: &Workspace) -> Result<Value> {
    let d = &ws.config.dataset;
    let manifest_path = ws.phantom_manifest();
    let existing: Vec<PhantomRecord> = if manifest_path.exists() { read_jsonl(&manifest_path)? } else { vec![] };
    if let Some(e) = existing.iter().find(|e| e.corpus_seed != d.seed || e.shape != d.shape) {
        return Err(Error::Config(format!(
            "{} holds phantoms of corpus seed {} at {:?}; use another root for seed {} at {:?}",
            manifest_path.display(),
            e.corpus_seed,
            e.shape,
            d.seed,
            d.shape
        )));
    }
    let n = d.n_phantoms.max(existing.len());
    let refs = PhantomRef::corpus(d.seed, n);
    let results = ws.exec.map(&refs, |r| -> Result<(PhantomRecord, bool)> {
        if let Some(e) = existing.get(r.index) {
            let path = ws.path(&e.volume_path);
            if path.exists() && ws.path(&e.lobes_path).exists() && file_sha256(&path)? == e.sha256 {
                return Ok((e.clone(), false));
            }
        }
        let volume_path = format!("phantoms/{:05}.f32.gz", r.index);
        let lobes_path = format!("phantoms/{:05}.lobes.gz", r.index);
        let p = generate_phantom(r.seed, d.shape)?;
        let provenance = Provenance { seed: r.seed, transforms: vec!["phantom".into()] };
        write_volume(&ws.path(&volume_path), &p.volume, &provenance)?;
        write_lobes(&ws.path(&lobes_path), &p.lobes, &provenance)?;
        let sha256 = file_sha256(&ws.path(&volume_path))?;
        Ok((
            PhantomRecord { index: r.index, seed: r.seed, corpus_seed: d.seed, shape: d.shape, volume_path, lobes_path, sha256 },
            true,
        ))
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let created = results.iter().filter(|r| r.1).count();
    let records: Vec<PhantomRecord> = results.into_iter().map(|r| r.0).collect();
    ws.write_records(&manifest_path, &records)?;
    Ok(json!({ "phantoms": records.len(), "created": created, "manifest": manifest_path }))
}

fn transform_names(r: &SampleRecord) -> Vec<String> {
    let mut t = vec!["phantom".to_string()];
    if let Some(l) = r.spec.occluded_lobe {
        t.push(format!("occlusion:{}", l.code()));
    }
    if r.spec.mirrored == Some(true) {
        t.push("mirror".into());
    }
    if let Some(rot) = r.spec.rotation {
        t.push(format!("rotation:{}", rot.degrees()));
    }
    t
}

pub fn inject(ws: &Workspace, task: Task, materialize: bool) -> Result<Value> {
    let phantoms = ws.read_phantom_manifest()?;
    let refs: Vec<PhantomRef> = phantoms.iter().map(|p| PhantomRef { index: p.index, seed: p.seed }).collect();
    let opts = DatasetOptions {
        task,
        seed: ws.config.dataset.seed,
        combined_multiplier: ws.config.dataset.combined_multiplier,
    };
    let mut records = build_dataset(&refs, &opts)?;
    if materialize {
        // Grouped by phantom so each phantom is read once; existing volume
        // files are left alone.
        let groups: Vec<(usize, Vec<usize>)> = phantoms
            .iter()
            .map(|p| (p.index, (0..records.len()).filter(|&i| records[i].phantom_index == p.index).collect()))
            .collect();
        let paths = ws.exec.map(&groups, |(pi, idx)| -> Result<Vec<(usize, String)>> {
            let mut phantom = None;
            let mut out = Vec::new();
            for &i in idx {
                let r = &records[i];
                let path = format!("volumes/{}/{}.f32.gz", task.name(), r.id);
                if !ws.path(&path).exists() {
                    if phantom.is_none() {
                        let p = &phantoms[*pi];
                        let (volume, _) = read_volume(&ws.path(&p.volume_path))?;
                        let lobes = volrep_core::io::read_lobes(&ws.path(&p.lobes_path))?;
                        phantom = Some(volrep_core::phantom::Phantom { volume, lobes, seed: p.seed });
                    }
                    let v = inject_findings(phantom.as_ref().expect("loaded above"), &r.spec)?;
                    let provenance = Provenance { seed: r.phantom_seed, transforms: transform_names(r) };
                    write_volume(&ws.path(&path), &v, &provenance)?;
                }
                out.push((i, path));
            }
            Ok(out)
        });
        for group in paths {
            for (i, path) in group? {
                records[i].volume_path = Some(path);
            }
        }
    }
    let path = ws.dataset_manifest(task);
    ws.write_records(&path, &records)?;
    let count = |s: Split| records.iter().filter(|r| r.split == s).count();
    Ok(json!({
        "task": task.name(),
        "samples": records.len(),
        "train": count(Split::Train),
        "val": count(Split::Val),
        "test": count(Split::Test),
        "manifest": path,
    }))
}

pub fn reports_gen(ws: &Workspace, task: Task) -> Result<Value> {
    let records = ws.read_dataset(task)?;
    let lib = ws.templates()?;
    let reports = ws.exec.map(&records, |r| -> Result<ReportRecord> {
        Ok(ReportRecord { id: r.id.clone(), text: render_report(&r.spec, &lib, r.report_seed)?.text() })
    });
    let reports = reports.into_iter().collect::<Result<Vec<_>>>()?;
    let path = ws.reports_file(task);
    ws.write_records(&path, &reports)?;
    Ok(json!({ "task": task.name(), "reports": reports.len(), "file": path }))
}

#[derive(serde::Serialize)]
struct LabelRow<'a> {
    report_id: &'a str,
    label_name: &'a str,
    value: u8,
}

fn write_label_csv(path: &Path, rows: &[(String, BTreeMap<String, u8>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (id, labels) in rows {
        for (name, &value) in labels {
            w.serialize(LabelRow { report_id: id, label_name: name, value })?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    Ok(atomic_write(path, &bytes)?)
}

pub fn mine_labels(ws: &Workspace, task: Task, input: Option<&Path>, bundled: bool) -> Result<Value> {
    let (rules, vocab) = ws.sarle()?;
    if bundled {
        let corpus = bundled_corpus();
        let rows: Vec<_> =
            corpus.iter().map(|r| (r.id.clone(), label_report(&r.text, &rules, &vocab))).collect();
        let path = "labels/bundled.csv";
        write_label_csv(&ws.path(path), &rows)?;
        let mut per_label = serde_json::Map::new();
        let (mut hits, mut total) = (0u64, 0u64);
        for name in vocab.label_names() {
            let e = evaluate_corpus(&corpus, name, &rules, &vocab)?;
            hits += e.confusion.tp + e.confusion.tn;
            total += e.confusion.total();
            per_label.insert(name.to_string(), serde_json::to_value(e).map_err(|e| Error::Internal(e.to_string()))?);
        }
        let summary = json!({
            "reports": corpus.len(),
            "accuracy": hits as f64 / total as f64,
            "labels": per_label,
            "file": path,
        });
        write_json(&ws.path("eval/sarle-bundled.json"), &summary)?;
        return Ok(summary);
    }
    let reports: Vec<ReportRecord> = match input {
        Some(p) if !p.exists() => return Err(Error::missing(p, "report file not found")),
        Some(p) => read_jsonl(p)?,
        None => ws.read_reports(task)?,
    };
    let rows: Vec<_> = reports.iter().map(|r| (r.id.clone(), label_report(&r.text, &rules, &vocab))).collect();
    let stem = input.and_then(|p| p.file_stem()).map_or(task.name().to_string(), |s| s.to_string_lossy().into());
    let path = ws.path(format!("labels/{stem}.csv"));
    write_label_csv(&path, &rows)?;
    let positives: BTreeMap<&str, usize> = vocab
        .label_names()
        .map(|n| (n, rows.iter().filter(|r| r.1.get(n) == Some(&1)).count()))
        .collect();
    Ok(json!({ "reports": rows.len(), "positives": positives, "file": path }))
}

/// Encoder inputs for `records`: stored volumes when materialised, otherwise
/// the phantom with its findings applied on demand.
fn encoder_samples(ws: &Workspace, records: &[SampleRecord]) -> Result<Vec<EncoderSample>> {
    let phantoms = ws.load_phantoms(records)?;
    let samples = ws.exec.map(records, |r| -> Result<EncoderSample> {
        let input = match &r.volume_path {
            Some(p) => EncoderInput::Volume(read_volume(&ws.path(p))?.0),
            None => EncoderInput::Injected {
                phantom: phantoms[r.phantom_index].clone().expect("loaded for injected samples"),
                findings: r.spec,
            },
        };
        Ok(EncoderSample { input, labels: r.label_bits.clone() })
    });
    samples.into_iter().collect()
}

fn split_samples<T: Clone>(records: &[SampleRecord], items: &[T], split: Split) -> Vec<T> {
    records.iter().zip(items).filter(|(r, _)| r.split == split).map(|(_, s)| s.clone()).collect()
}

fn require_nonempty<T>(v: &[T], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidData(format!("the {what} split is empty; generate more phantoms")));
    }
    Ok(())
}

fn encoder_accuracy(enc: &Encoder, samples: &[EncoderSample], ws: &Workspace) -> Result<f64> {
    let inputs: Vec<EncoderInput> = samples.iter().map(|s| s.input.clone()).collect();
    let labels: Vec<Vec<u8>> = samples.iter().map(|s| s.labels.clone()).collect();
    Ok(encoder_metrics(&predict_all(enc, &inputs, ws.exec)?, &labels)?.accuracy)
}

fn train_config(ws: &Workspace, base: &TrainConfig) -> TrainConfig {
    TrainConfig { execution: ws.exec, ..base.clone() }
}

struct Fitted<M> {
    model: M,
    outcome: TrainOutcome,
    /// Validation metric of the kept model.
    metric: f64,
    search: Option<SearchResult<()>>,
    /// Training settings that produced the kept model.
    config: TrainConfig,
}

/// A single training run, or the adaptive search when enabled.
fn fit<M, F>(ws: &Workspace, base: &TrainConfig, mut run: F) -> Result<Fitted<M>>
where
    F: FnMut(&TrainConfig) -> Result<(M, TrainOutcome, f64)>,
{
    let s = &ws.config.search;
    if !s.enabled {
        let (m, out, metric) = run(base)?;
        return Ok(Fitted { model: m, outcome: out, metric, search: None, config: base.clone() });
    }
    // The search only understands the model crate's errors: training
    // failures pass through as such, anything else is parked and re-raised.
    let mut parked = None;
    let result = hyperparameter_search(base, &s.grid, s.target, s.budget, |cfg| match run(cfg) {
        Ok((m, out, metric)) => {
            let dynamics = Dynamics::classify(&out);
            Ok(Trial { metric, dynamics, artifact: (m, out) })
        }
        Err(Error::Training(reason)) => {
            Err(volrep_nn::Error::Training { step: 0, reason, snapshot: String::new() })
        }
        Err(e) => {
            let msg = e.to_string();
            parked = Some(e);
            Err(volrep_nn::Error::InvalidInput(msg))
        }
    });
    if let Some(e) = parked {
        return Err(e);
    }
    let result = result?;
    let log = SearchResult { best: None, log: result.log, successful: result.successful };
    let (cfg, trial) = result.best.ok_or_else(|| Error::Training("every search combination diverged".into()))?;
    let (m, out) = trial.artifact;
    Ok(Fitted { model: m, outcome: out, metric: trial.metric, search: Some(log), config: cfg })
}

fn write_search_log(ws: &Workspace, stem: &str, log: &Option<SearchResult<()>>) -> Result<Option<PathBuf>> {
    let Some(log) = log else { return Ok(None) };
    let path = ws.path(format!("search/{stem}.jsonl"));
    ws.write_records(&path, &log.log)?;
    Ok(Some(path))
}

pub fn train_encoder(ws: &Workspace, task: Task) -> Result<Value> {
    let records = ws.read_dataset(task)?;
    let samples = encoder_samples(ws, &records)?;
    let (tr, va) = (split_samples(&records, &samples, Split::Train), split_samples(&records, &samples, Split::Val));
    require_nonempty(&tr, "training")?;
    require_nonempty(&va, "validation")?;
    let cfg = ws.config.encoder_config(task);
    let base = train_config(ws, &ws.config.train_encoder);
    log("train_encoder", json!({ "task": task.name(), "train": tr.len(), "val": va.len() }));
    let Fitted { model: enc, outcome: out, metric: val_acc, search, config: used } = fit(ws, &base, |tc| {
        let mut enc = Encoder::new(cfg.clone())?;
        let out = train(&mut enc, &tr, &va, tc, None)?;
        let acc = encoder_accuracy(&enc, &va, ws)?;
        log("trained", json!({ "lr": tc.learning_rate, "batch": tc.batch_size, "steps": out.steps, "val_accuracy": acc }));
        Ok((enc, out, acc))
    })?;
    let stem = format!("encoder-{}", task.name());
    let ckpt = ws.encoder_checkpoint(task);
    let metrics = vec![("val_loss".to_string(), out.best_val_loss), ("val_accuracy".to_string(), val_acc)];
    checkpoint::save(&ckpt, ENCODER, &enc.config, &enc.params, out.best_step, metrics)?;
    let hist = ws.path(format!("history/{stem}.csv"));
    history::write_history(&hist, &out.history)?;
    let search_log = write_search_log(ws, &stem, &search)?;
    Ok(json!({
        "task": task.name(),
        "checkpoint": ckpt,
        "history": hist,
        "steps": out.steps,
        "best_step": out.best_step,
        "val_loss": out.best_val_loss,
        "val_accuracy": val_acc,
        "learning_rate": used.learning_rate,
        "batch_size": used.batch_size,
        "search_log": search_log,
        "search_successful": search.as_ref().map(|s| s.successful),
    }))
}

fn load_encoder(ws: &Workspace, task: Task) -> Result<Encoder> {
    let path = ws.encoder_checkpoint(task);
    if !path.exists() {
        return Err(Error::missing(&path, format!("run train-encoder --task {} first", task.name())));
    }
    let mut enc = Encoder::new(ws.config.encoder_config(task))?;
    let cfg = enc.config.clone();
    checkpoint::load_into(&path, ENCODER, &cfg, &mut enc.params)?;
    Ok(enc)
}

pub fn eval_encoder(ws: &Workspace, task: Task, split: Split) -> Result<Value> {
    let enc = load_encoder(ws, task)?;
    let records: Vec<SampleRecord> = of_split(&ws.read_dataset(task)?, split).into_iter().cloned().collect();
    require_nonempty(&records, split_name(split))?;
    let samples = encoder_samples(ws, &records)?;
    let inputs: Vec<EncoderInput> = samples.iter().map(|s| s.input.clone()).collect();
    let labels: Vec<Vec<u8>> = samples.iter().map(|s| s.labels.clone()).collect();
    let preds = predict_all(&enc, &inputs, ws.exec)?;
    let m = encoder_metrics(&preds, &labels)?;
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probabilities.clone()).collect();
    let stem = format!("encoder-{}-{}", task.name(), split_name(split));
    let pr_path = match multilabel_pr_auc(&probs, &labels) {
        Ok(curve) => {
            // Relative to the run root so the summary does not depend on
            // where the run lives.
            let rel = format!("eval/{stem}-pr.csv");
            history::write_pr_curve(&ws.path(&rel), &curve.points)?;
            Some(rel)
        }
        Err(volrep_core::Error::Undefined(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let summary = json!({
        "task": task.name(),
        "split": split_name(split),
        "n": m.n,
        "accuracy": m.accuracy,
        "per_bit_accuracy": m.per_bit_accuracy,
        "pr_auc": m.pr_auc,
        "pr_curve": pr_path,
    });
    write_json(&ws.path(format!("eval/{stem}.json")), &summary)?;
    Ok(summary)
}

pub fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

pub fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::Usage(format!("unknown split '{s}' (train | val | test)"))),
    }
}

/// Everything the decoder commands need: the trained encoder's memories and
/// the tokenised reference reports, aligned with the dataset records.
struct DecoderData {
    records: Vec<SampleRecord>,
    samples: Vec<DecoderSample>,
    vocab: Vocabulary,
    lib: TemplateLibrary,
    config: DecoderConfig,
}

fn decoder_data(ws: &Workspace, task: Task, kind: MemoryKind, only: Option<Split>) -> Result<DecoderData> {
    let enc = load_encoder(ws, task)?;
    let (rows, width) = enc.memory_shape(kind)?;
    let mut records = ws.read_dataset(task)?;
    if let Some(s) = only {
        records.retain(|r| r.split == s);
    }
    let texts: BTreeMap<String, String> = ws.read_reports(task)?.into_iter().map(|r| (r.id, r.text)).collect();
    let lib = ws.templates()?;
    let vocab = Vocabulary::from_words(lib.words());
    let inputs = encoder_samples(ws, &records)?;
    let memories = ws.exec.map(&inputs, |s| -> Result<Memory> { Ok(enc.memory(&s.input.features(&enc)?, kind)?) });
    let mut samples = Vec::with_capacity(records.len());
    for (r, m) in records.iter().zip(memories) {
        let text = texts
            .get(&r.id)
            .ok_or_else(|| Error::InvalidData(format!("no report for sample {}; rerun reports-gen", r.id)))?;
        samples.push(DecoderSample { memory: m?, reference: vocab.encode_report(text) });
    }
    let config = DecoderConfig {
        vocab_size: vocab.len(),
        memory: kind,
        memory_len: rows,
        memory_width: width,
        ..ws.config.decoder.clone()
    };
    Ok(DecoderData { records, samples, vocab, lib, config })
}

pub fn train_decoder(ws: &Workspace, task: Task, kind: MemoryKind) -> Result<Value> {
    let data = decoder_data(ws, task, kind, None)?;
    let tr = split_samples(&data.records, &data.samples, Split::Train);
    let va = split_samples(&data.records, &data.samples, Split::Val);
    require_nonempty(&tr, "training")?;
    require_nonempty(&va, "validation")?;
    let base = train_config(ws, &ws.config.train_decoder);
    log("train_decoder", json!({ "task": task.name(), "representation": representation_name(kind), "train": tr.len() }));
    let Fitted { model: dec, outcome: out, metric: nwa, search, config: used } = fit(ws, &base, |tc| {
        let mut dec = Decoder::new(data.config.clone())?;
        let out = train(&mut dec, &tr, &va, tc, None)?;
        let nwa = next_word_accuracy(&dec, &va, ws.exec)?;
        log("trained", json!({ "lr": tc.learning_rate, "batch": tc.batch_size, "steps": out.steps, "val_next_word_accuracy": nwa }));
        Ok((dec, out, nwa))
    })?;
    let stem = ws.decoder_stem(task, kind);
    let ckpt = ws.decoder_checkpoint(task, kind);
    let metrics = vec![("val_loss".to_string(), out.best_val_loss), ("val_next_word_accuracy".to_string(), nwa)];
    checkpoint::save(&ckpt, DECODER, &dec.config, &dec.params, out.best_step, metrics)?;
    let hist = ws.path(format!("history/{stem}.csv"));
    history::write_history(&hist, &out.history)?;
    let search_log = write_search_log(ws, &stem, &search)?;
    Ok(json!({
        "task": task.name(),
        "representation": representation_name(kind),
        "checkpoint": ckpt,
        "history": hist,
        "steps": out.steps,
        "best_step": out.best_step,
        "val_loss": out.best_val_loss,
        "val_next_word_accuracy": nwa,
        "learning_rate": used.learning_rate,
        "batch_size": used.batch_size,
        "search_log": search_log,
        "search_successful": search.as_ref().map(|s| s.successful),
    }))
}

fn load_decoder(ws: &Workspace, task: Task, kind: MemoryKind, config: &DecoderConfig) -> Result<Decoder> {
    let path = ws.decoder_checkpoint(task, kind);
    if !path.exists() {
        return Err(Error::missing(
            &path,
            format!("run train-decoder --task {} --representation {} first", task.name(), representation_name(kind)),
        ));
    }
    let mut dec = Decoder::new(config.clone())?;
    checkpoint::load_into(&path, DECODER, config, &mut dec.params)?;
    Ok(dec)
}

fn generate_split(ws: &Workspace, data: &DecoderData, dec: &Decoder) -> Result<Vec<GeneratedRecord>> {
    let memories: Vec<Memory> = data.samples.iter().map(|s| s.memory.clone()).collect();
    let gens = generate_all(dec, &memories, data.config.max_len, ws.exec)?;
    data.records
        .iter()
        .zip(&gens)
        .map(|(r, g)| {
            Ok(GeneratedRecord {
                id: r.id.clone(),
                text: generated_report(&data.vocab, g)?.text(),
                stop_reason: match g.stop_reason {
                    StopReason::Eos => "eos".into(),
                    StopReason::MaxLen => "max_len".into(),
                },
                n_tokens: g.ids.len(),
            })
        })
        .collect()
}

pub fn eval_decoder(ws: &Workspace, task: Task, kind: MemoryKind, split: Split) -> Result<Value> {
    let data = decoder_data(ws, task, kind, Some(split))?;
    require_nonempty(&data.samples, split_name(split))?;
    let dec = load_decoder(ws, task, kind, &data.config)?;
    let nwa = next_word_accuracy(&dec, &data.samples, ws.exec)?;
    let generated = generate_split(ws, &data, &dec)?;
    let reports: Vec<_> = generated.iter().map(|g| volrep_core::report::Report::from_text(&g.text)).collect();
    let truths: Vec<_> = data.records.iter().map(|r| r.spec).collect();
    let fa = factual_accuracy(&reports, &truths, &data.lib)?;
    let summary = json!({
        "task": task.name(),
        "representation": representation_name(kind),
        "split": split_name(split),
        "n": data.samples.len(),
        "next_word_accuracy": nwa,
        "factual_accuracy": fa,
    });
    let stem = format!("{}-{}", ws.decoder_stem(task, kind), split_name(split));
    write_json(&ws.path(format!("eval/{stem}.json")), &summary)?;
    Ok(summary)
}

pub fn generate(ws: &Workspace, task: Task, kind: MemoryKind, split: Split) -> Result<Value> {
    let data = decoder_data(ws, task, kind, Some(split))?;
    require_nonempty(&data.samples, split_name(split))?;
    let dec = load_decoder(ws, task, kind, &data.config)?;
    let generated = generate_split(ws, &data, &dec)?;
    let path = ws.path(format!("generated/{}-{}.jsonl", ws.decoder_stem(task, kind), split_name(split)));
    ws.write_records(&path, &generated)?;
    Ok(json!({ "reports": generated.len(), "file": path }))
}

pub fn plot(input: &Path, output: Option<&Path>, metric: &str) -> Result<Value> {
    let output = output.map(Path::to_path_buf).unwrap_or_else(|| input.with_extension("png"));
    match history::detect(input)? {
        CsvKind::History => {
            let rows = history::read_history(input)?;
            let mut by_split: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for r in rows.iter().filter(|r| r.metric == metric) {
                by_split.entry(r.split.clone()).or_default().push((r.step as f64, r.value));
            }
            if by_split.is_empty() {
                return Err(Error::InvalidData(format!("{} has no '{metric}' rows", input.display())));
            }
            let series: Vec<Series> = by_split.into_values().map(|points| Series { points }).collect();
            plot::render(&output, &series, None, None)?;
            Ok(json!({ "kind": "history", "metric": metric, "series": series.len(), "image": output }))
        }
        CsvKind::PrCurve => {
            let pts: Vec<(f64, f64)> =
                history::read_pr_curve(input)?.iter().map(|p| (p.recall, p.precision)).collect();
            plot::render(&output, &[Series { points: plot::pr_steps(&pts) }], Some((0.0, 1.0)), Some((0.0, 1.0)))?;
            Ok(json!({ "kind": "pr_curve", "points": pts.len(), "image": output }))
        }
    }
}
