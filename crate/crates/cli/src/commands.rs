// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;
use tfdecomp_core::analysis::{self, correlate_importances, ff_fit_by_layer, importance_samples, AgreementMatrix};
use tfdecomp_core::io::checkpoint::{load_config, save_checkpoint, save_config, Dtype, NameMap};
use tfdecomp_core::io::corpus::{read_corpus, write_corpus, Sequence};
use tfdecomp_core::io::report::{self, ResidualRow, TableFormat, TermWriter};
use tfdecomp_core::probes::{
    self, build_dataset, drop_monosemous, most_frequent_baseline, read_records, synthetic_records, tied_predict,
    write_records, BankItem, DatasetRecord, KnnBank, Metric, MlmConfig, ProbeDataset, ProbeHyper, Selector, Split,
    Vocabularies,
};
use tfdecomp_core::toy::{random_corpus, random_model, ToySpec};
use tfdecomp_core::{decompose_closed, verify as verify_terms, Activation, Error, ImportanceProfile, Model, Precision};

use crate::config::{pick, CutSpec, RunConfig};
use crate::{CliError, CorpusArgs, ModelArgs};

pub struct Context {
    pub out: Option<PathBuf>,
    pub file: RunConfig,
}

impl Context {
    fn out_dir(&self, default: &str) -> Result<PathBuf, CliError> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from(default));
        fs::create_dir_all(&dir).map_err(|e| CliError::usage(format!("--out {}: {e}", dir.display())))?;
        Ok(dir)
    }
}

fn at(path: &Path, e: impl std::fmt::Display) -> CliError {
    let msg = e.to_string();
    let p = path.display().to_string();
    if msg.starts_with(&p) {
        CliError::usage(msg)
    } else {
        CliError::usage(format!("{p}: {msg}"))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| at(path, e))
}

struct Loaded {
    model: Model,
    dir: PathBuf,
    precision: Precision,
}

fn load_model_at(ctx: &Context, args: &ModelArgs, path: PathBuf) -> Result<Loaded, CliError> {
    if !path.exists() {
        return Err(CliError::usage(format!("--model {}: no such file or directory", path.display())));
    }
    let (ckpt, dir) = if path.is_dir() {
        (path.join("model.safetensors"), path)
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (path, dir)
    };
    let cfg_path = pick(&args.model_config, &ctx.file.model_config).unwrap_or_else(|| dir.join("config.json"));
    let map = match pick(&args.name_map, &ctx.file.name_map) {
        Some(p) => NameMap::from_json_file(&p).map_err(|e| at(&p, e))?,
        None => NameMap::default(),
    };
    let precision = pick(&args.precision, &ctx.file.precision).unwrap_or_default();
    let cfg = load_config(&cfg_path).map_err(|e| at(&cfg_path, e))?;
    let params = tfdecomp_core::load_checkpoint(&ckpt, &cfg, &map).map_err(|e| at(&ckpt, e))?;
    let model = Model::new(cfg, params.rounded(precision)).map_err(|e| at(&ckpt, e))?;
    log::info!("loaded {} ({precision:?})", ckpt.display());
    Ok(Loaded { model, dir, precision })
}

fn load_model(ctx: &Context, args: &ModelArgs) -> Result<Loaded, CliError> {
    let path = pick(&args.model, &ctx.file.model).unwrap_or_else(|| PathBuf::from("toy"));
    load_model_at(ctx, args, path)
}

fn load_corpus(ctx: &Context, args: &CorpusArgs, model_dir: &Path, model: &Model) -> Result<Vec<Sequence>, CliError> {
    let path = match pick(&args.corpus, &ctx.file.corpus) {
        Some(p) => p,
        None => {
            let p = model_dir.join("corpus.txt");
            if !p.exists() {
                return Err(CliError::usage(format!(
                    "no --corpus given and {} does not exist",
                    p.display()
                )));
            }
            p
        }
    };
    let segments = pick(&args.segments, &ctx.file.segments);
    let corpus = read_corpus(&path, segments.as_deref()).map_err(|e| at(&path, e))?;
    if corpus.is_empty() {
        return Err(at(&path, "corpus has no sequences"));
    }
    let cfg = &model.config;
    for (i, seq) in corpus.iter().enumerate() {
        if seq.is_empty() || seq.len() > cfg.max_pos {
            return Err(at(
                &path,
                format!("line {}: length {} outside 1..={}", i + 1, seq.len(), cfg.max_pos),
            ));
        }
        if let Some(&t) = seq.tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(at(&path, format!("line {}: token {t} outside vocabulary of {}", i + 1, cfg.vocab)));
        }
    }
    Ok(corpus)
}

fn cut_spec(flag: Option<String>, ctx: &Context, default: &str) -> Result<CutSpec, CliError> {
    CutSpec::parse(&pick(&flag, &ctx.file.cuts).unwrap_or_else(|| default.to_string()))
}

pub fn verify(
    ctx: &Context,
    margs: &ModelArgs,
    cargs: &CorpusArgs,
    tolerance: Option<f64>,
    cuts: Option<String>,
) -> Result<(), CliError> {
    let loaded = load_model(ctx, margs)?;
    let model = &loaded.model;
    let corpus = load_corpus(ctx, cargs, &loaded.dir, model)?;
    let tol = pick(&tolerance, &ctx.file.tolerance).unwrap_or(loaded.precision.default_tolerance());
    if tol.is_nan() || tol < 0.0 {
        return Err(CliError::usage(format!("--tolerance must be non-negative, got {tol}")));
    }
    let cuts = cut_spec(cuts, ctx, "last")?.resolve(model.config.sublayers())?;
    let rows: Vec<Vec<ResidualRow>> = corpus
        .par_iter()
        .enumerate()
        .map(|(s, seq)| {
            let (_, trace) = model.forward(&seq.tokens, seq.segments())?;
            cuts.iter()
                .map(|&cut| {
                    let r = verify_terms(&decompose_closed(model, &trace, cut)?, tol);
                    Ok(ResidualRow {
                        sequence_id: s,
                        layer_cut: cut,
                        tokens: r.per_token.len(),
                        max: r.max,
                        mean: r.mean,
                        passed: r.passed(),
                    })
                })
                .collect::<Result<Vec<_>, Error>>()
        })
        .collect::<Result<_, Error>>()?;
    let rows: Vec<ResidualRow> = rows.into_iter().flatten().collect();
    let out = ctx.out_dir("out")?.join("residuals.csv");
    report::write_residuals(create(&out)?, &rows).map_err(|e| at(&out, e))?;
    let max = rows.iter().map(|r| r.max).fold(0.0, f64::max);
    let failed = rows.iter().filter(|r| !r.passed).count();
    let tokens: usize = rows.iter().map(|r| r.tokens).sum();
    println!(
        "max residual {max:e} over {tokens} token-cuts ({} sequences, {} cut(s)); tolerance {tol:e}",
        corpus.len(),
        cuts.len()
    );
    if failed > 0 {
        return Err(CliError::Invariant(format!(
            "verify: {failed} sequence-cut(s) exceed tolerance {tol:e} (max residual {max:e})"
        )));
    }
    println!("ok");
    Ok(())
}

pub fn decompose(
    ctx: &Context,
    margs: &ModelArgs,
    cargs: &CorpusArgs,
    cuts: Option<String>,
    format: Option<String>,
) -> Result<(), CliError> {
    let loaded = load_model(ctx, margs)?;
    let model = &loaded.model;
    let corpus = load_corpus(ctx, cargs, &loaded.dir, model)?;
    let cuts = cut_spec(cuts, ctx, "last")?.resolve(model.config.sublayers())?;
    let format_name = pick(&format, &ctx.file.format).unwrap_or_else(|| "csv".into());
    let format: TableFormat = format_name.parse().map_err(|e| CliError::usage(format!("--format: {e}")))?;
    let sets: Vec<Vec<_>> = corpus
        .par_iter()
        .map(|seq| {
            let (_, trace) = model.forward(&seq.tokens, seq.segments())?;
            cuts.iter()
                .map(|&c| decompose_closed(model, &trace, c))
                .collect::<Result<Vec<_>, Error>>()
        })
        .collect::<Result<_, Error>>()?;
    let out = ctx.out_dir("out")?.join(format!("terms.{format_name}"));
    let mut w = TermWriter::new(create(&out)?, format);
    for (s, per_cut) in sets.iter().enumerate() {
        for ts in per_cut {
            w.write(s, ts).map_err(|e| at(&out, e))?;
        }
    }
    w.finish().map_err(|e| at(&out, e))?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn importance(ctx: &Context, margs: &ModelArgs, cargs: &CorpusArgs, cuts: Option<String>) -> Result<(), CliError> {
    let loaded = load_model(ctx, margs)?;
    let model = &loaded.model;
    let corpus = load_corpus(ctx, cargs, &loaded.dir, model)?;
    let layers = cut_spec(cuts, ctx, "all")?.resolve(model.config.layers)?;
    let mut profile = ImportanceProfile::from_samples(&importance_samples(model, &corpus)?);
    profile.entries.retain(|e| layers.contains(&e.layer));
    let out = ctx.out_dir("out")?.join("importance.csv");
    report::write_profile(create(&out)?, &profile).map_err(|e| at(&out, e))?;
    println!("layer  term  mean");
    for e in &profile.entries {
        let mean = e.mean.map_or("-".to_string(), |m| format!("{m:.4}"));
        println!("{:>5}  {:>4}  {mean}", e.layer, e.term.symbol());
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn ff_fit(ctx: &Context, margs: &ModelArgs, cargs: &CorpusArgs) -> Result<(), CliError> {
    let loaded = load_model(ctx, margs)?;
    let model = &loaded.model;
    let corpus = load_corpus(ctx, cargs, &loaded.dir, model)?;
    let fits = ff_fit_by_layer(model, &corpus)?;
    if let Some(f) = fits.first() {
        if f.samples < 1000 {
            log::warn!("only {} samples per layer; r2 estimates are noisy", f.samples);
        }
    }
    let out = ctx.out_dir("out")?.join("ff_fit.csv");
    report::write_fits(create(&out)?, &fits).map_err(|e| at(&out, e))?;
    for (l, f) in fits.iter().enumerate() {
        println!("layer {}: r2 {:.6} ({} samples)", l + 1, f.r2, f.samples);
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn correlate(
    ctx: &Context,
    margs: &ModelArgs,
    model_b: Option<PathBuf>,
    cargs: &CorpusArgs,
) -> Result<(), CliError> {
    let a = load_model(ctx, margs)?;
    let path_b = pick(&model_b, &ctx.file.model_b).ok_or_else(|| CliError::usage("correlate needs --model-b"))?;
    let b_args = ModelArgs {
        model: Some(path_b.clone()),
        model_config: None,
        name_map: margs.name_map.clone(),
        precision: margs.precision,
    };
    let b = load_model_at(ctx, &b_args, path_b.clone())?;
    if a.model.config.layers != b.model.config.layers {
        return Err(CliError::usage(format!(
            "--model-b {}: {} layers, --model has {}",
            path_b.display(),
            b.model.config.layers,
            a.model.config.layers
        )));
    }
    let corpus = load_corpus(ctx, cargs, &a.dir, &a.model)?;
    load_corpus(ctx, cargs, &a.dir, &b.model)?;
    let rows = correlate_importances(&importance_samples(&a.model, &corpus)?, &importance_samples(&b.model, &corpus)?)?;
    let out = ctx.out_dir("out")?.join("correlation.csv");
    report::write_correlations(create(&out)?, &rows).map_err(|e| at(&out, e))?;
    for r in &rows {
        println!("layer {} {}: rho {:.4}", r.layer, r.term.symbol(), r.rho);
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn agree(ctx: &Context, predictions: Option<PathBuf>, mode: Option<String>) -> Result<(), CliError> {
    let path = pick(&predictions, &ctx.file.predictions).ok_or_else(|| CliError::usage("agree needs --predictions"))?;
    let mode: analysis::AgreementMode = pick(&mode, &ctx.file.mode)
        .unwrap_or_else(|| "micro".into())
        .parse()
        .map_err(|e| CliError::usage(format!("--mode: {e}")))?;
    let mut reader = csv::Reader::from_path(&path).map_err(|e| at(&path, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| at(&path, e))?.iter().map(str::to_string).collect();
    let mut columns: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for rec in reader.records() {
        let rec = rec.map_err(|e| at(&path, e))?;
        for (c, v) in columns.iter_mut().zip(rec.iter()) {
            c.push(v.to_string());
        }
    }
    let mut gold = None;
    let mut systems = Vec::new();
    for (name, col) in header.into_iter().zip(columns) {
        match name.as_str() {
            "item" => {}
            "gold" => gold = Some(col),
            _ => systems.push((name, col)),
        }
    }
    if systems.is_empty() {
        return Err(at(&path, "no prediction columns"));
    }
    let m = AgreementMatrix::build(&systems, mode, gold.as_deref()).map_err(|e| at(&path, e))?;
    let out = ctx.out_dir("out")?.join("agreement.csv");
    report::write_agreement(create(&out)?, &m).map_err(|e| at(&out, e))?;
    for (name, row) in m.names.iter().zip(&m.values) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:6.2}")).collect();
        println!("{name:>16} {}", cells.join(" "));
    }
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Debug, Default)]
pub struct ProbeFlags {
    pub task: Option<String>,
    pub records: Option<PathBuf>,
    pub cut: Option<String>,
    pub selectors: Option<Vec<String>>,
    pub method: Option<String>,
    pub metric: Option<String>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub mask_token: Option<u32>,
    pub drop_monosemous: Option<bool>,
}

const METHODS: [&str; 4] = ["linear", "knn", "tied", "baseline"];

#[derive(Debug, serde::Serialize)]
struct ProbeRow<'a> {
    task: &'a str,
    method: &'a str,
    selector: String,
    split: &'a str,
    metric: &'a str,
    value: f64,
    items: usize,
}

pub fn probe(ctx: &Context, margs: &ModelArgs, cargs: &CorpusArgs, flags: ProbeFlags) -> Result<(), CliError> {
    let f = &ctx.file;
    let loaded = load_model(ctx, margs)?;
    let model = &loaded.model;
    let corpus = load_corpus(ctx, cargs, &loaded.dir, model)?;
    let task = pick(&flags.task, &f.task).unwrap_or_else(|| "wsd".into());
    let seed = pick(&flags.seed, &f.seed).unwrap_or(0);
    let k = pick(&flags.k, &f.k).unwrap_or(5);
    let metric_name = pick(&flags.metric, &f.metric).unwrap_or_else(|| "accuracy".into());
    let metric: Metric = metric_name.parse().map_err(|e| CliError::usage(format!("--metric: {e}")))?;
    let method = pick(&flags.method, &f.method).unwrap_or_else(|| "linear".into());
    let methods: Vec<&str> = match method.as_str() {
        // knn needs lemmas and tied needs token-id labels
        "all" if task == "mlm" => METHODS.iter().copied().filter(|&m| m != "knn").collect(),
        "all" => METHODS.iter().copied().filter(|&m| m != "tied").collect(),
        m if METHODS.contains(&m) => vec![m],
        other => return Err(CliError::usage(format!("--method: unknown method `{other}`"))),
    };
    let selectors: Vec<Selector> = pick(&flags.selectors, &f.selectors)
        .unwrap_or_else(|| ["e", "i", "h", "f", "c"].map(String::from).to_vec())
        .iter()
        .map(|s| s.parse().map_err(|e| CliError::usage(format!("--selectors: {e}"))))
        .collect::<Result<_, _>>()?;
    let cut = match cut_spec(flags.cut, ctx, "last")?.resolve(model.config.sublayers())?.as_slice() {
        [c] => *c,
        _ => return Err(CliError::usage("--cuts: probe takes a single cut")),
    };

    let (records, probe_corpus) = match task.as_str() {
        "wsd" => {
            let path = pick(&flags.records, &f.records).unwrap_or_else(|| loaded.dir.join("dataset.jsonl"));
            let mut records = read_records(&path).map_err(|e| at(&path, e))?;
            if pick(&flags.drop_monosemous, &f.drop_monosemous).unwrap_or(false) {
                records = drop_monosemous(records);
            }
            if methods == ["tied"] {
                return Err(CliError::usage("--method tied only applies to --task mlm"));
            }
            (records, corpus)
        }
        "mlm" => {
            let mlm = MlmConfig {
                vocab: model.config.vocab,
                mask_token: pick(&flags.mask_token, &f.mask_token).unwrap_or(model.config.vocab as u32 - 1),
                ..MlmConfig::default()
            };
            if mlm.mask_token as usize >= model.config.vocab {
                return Err(CliError::usage(format!(
                    "--mask-token {} outside vocabulary of {}",
                    mlm.mask_token, model.config.vocab
                )));
            }
            let tokens: Vec<Vec<u32>> = corpus.iter().map(|s| s.tokens.clone()).collect();
            let (corrupted, targets) = probes::mlm_corrupt(&tokens, &mlm, seed)?;
            let records = targets
                .iter()
                .map(|t| DatasetRecord {
                    sequence_id: t.sequence,
                    token_span: [t.position, t.position + 1],
                    lemma: None,
                    label: t.original.to_string(),
                    split: None,
                })
                .collect();
            let probe_corpus = corrupted
                .into_iter()
                .zip(corpus)
                .map(|(tokens, s)| Sequence {
                    tokens,
                    segments: s.segments,
                })
                .collect();
            (records, probe_corpus)
        }
        other => return Err(CliError::usage(format!("--task: unknown task `{other}`"))),
    };
    if records.is_empty() {
        return Err(CliError::usage("probe dataset is empty"));
    }

    let hp = ProbeHyper {
        seed,
        ..ProbeHyper::default()
    };
    let mut rows = Vec::new();
    let mut test_preds: Vec<(String, Vec<u32>)> = Vec::new();
    let mut reference: Option<(ProbeDataset, Vocabularies)> = None;
    for sel in &selectors {
        let (data, vocab) = build_dataset(model, &probe_corpus, &records, cut, sel, seed)?;
        for &m in &methods {
            let preds: Option<BTreeMap<Split, Vec<u32>>> = match m {
                "linear" => {
                    let p = probes::train_linear_probe(&data, &hp)?;
                    Some(
                        [Split::Val, Split::Test]
                            .into_iter()
                            .map(|s| (s, data.indices(s).iter().map(|&i| p.predict(&data.items[i].feature)).collect()))
                            .collect(),
                    )
                }
                "knn" => Some(knn_predictions(&data, k)?),
                "tied" if task == "mlm" => {
                    let lookup: BTreeMap<u32, u32> = vocab
                        .labels
                        .iter()
                        .enumerate()
                        .map(|(i, l)| (l.parse::<u32>().expect("mlm labels are token ids"), i as u32))
                        .collect();
                    let mut out = BTreeMap::new();
                    for s in [Split::Val, Split::Test] {
                        let p = data
                            .indices(s)
                            .iter()
                            .map(|&i| {
                                let tok = tied_predict(&model.params.word_emb, &data.items[i].feature)?;
                                // tokens never seen as targets cannot match any gold label
                                Ok(lookup.get(&tok).copied().unwrap_or(u32::MAX))
                            })
                            .collect::<Result<_, Error>>()?;
                        out.insert(s, p);
                    }
                    Some(out)
                }
                _ => None,
            };
            let Some(preds) = preds else { continue };
            for (split, p) in &preds {
                let idx = data.indices(*split);
                if idx.is_empty() {
                    continue;
                }
                let gold: Vec<u32> = idx.iter().map(|&i| data.items[i].label).collect();
                rows.push(ProbeRow {
                    task: &task,
                    method: m,
                    selector: sel.to_string(),
                    split: if *split == Split::Val { "val" } else { "test" },
                    metric: &metric_name,
                    value: metric.score(&gold, p)?,
                    items: idx.len(),
                });
            }
            test_preds.push((format!("{m}:{sel}"), preds[&Split::Test].clone()));
        }
        if reference.is_none() {
            reference = Some((data, vocab));
        }
    }
    let (data, vocab) = reference.expect("at least one selector");
    if methods.contains(&"baseline") {
        let test = data.indices(Split::Test);
        if !test.is_empty() {
            rows.push(ProbeRow {
                task: &task,
                method: "baseline",
                selector: "-".into(),
                split: "test",
                metric: &metric_name,
                value: most_frequent_baseline(&data, metric)?,
                items: test.len(),
            });
        }
    }

    let dir = ctx.out_dir("out")?;
    let out = dir.join("probe.csv");
    {
        let mut w = csv::Writer::from_writer(create(&out)?);
        for r in &rows {
            w.serialize(r).map_err(|e| at(&out, e))?;
        }
        w.flush().map_err(|e| at(&out, e))?;
    }
    let pred_path = dir.join("predictions.csv");
    {
        let test = data.indices(Split::Test);
        let name = |id: u32| vocab.labels.get(id as usize).cloned().unwrap_or_else(|| "<unk>".into());
        let mut w = csv::Writer::from_writer(create(&pred_path)?);
        let mut header = vec!["item".to_string(), "gold".to_string()];
        header.extend(test_preds.iter().map(|(n, _)| n.clone()));
        w.write_record(&header).map_err(|e| at(&pred_path, e))?;
        for (row, &i) in test.iter().enumerate() {
            let mut rec = vec![i.to_string(), name(data.items[i].label)];
            rec.extend(test_preds.iter().map(|(_, p)| name(p[row])));
            w.write_record(&rec).map_err(|e| at(&pred_path, e))?;
        }
        w.flush().map_err(|e| at(&pred_path, e))?;
    }
    for r in &rows {
        println!(
            "{} {:<8} {:<8} {:<4} {} {:.4} ({} items)",
            r.task, r.method, r.selector, r.split, r.metric, r.value, r.items
        );
    }
    println!("wrote {} and {}", out.display(), pred_path.display());
    Ok(())
}

/// Lemma-restricted neighbours from the train split; queries whose lemma
/// has no train item fall back to the global train mode.
fn knn_predictions(data: &ProbeDataset, k: usize) -> Result<BTreeMap<Split, Vec<u32>>, CliError> {
    let train = data.indices(Split::Train);
    let mut bank = Vec::with_capacity(train.len());
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &i in &train {
        let it = &data.items[i];
        let group = it
            .group
            .ok_or_else(|| CliError::usage("--method knn needs records with a lemma"))?;
        *counts.entry(it.label).or_default() += 1;
        bank.push(BankItem {
            vector: it.feature.clone(),
            label: it.label,
            group,
        });
    }
    let fallback = counts
        .iter()
        .fold((0usize, 0u32), |best, (&l, &c)| if c > best.0 { (c, l) } else { best })
        .1;
    let bank = KnnBank::new(bank);
    let mut out = BTreeMap::new();
    for split in [Split::Val, Split::Test] {
        let queries: Vec<_> = data
            .indices(split)
            .iter()
            .map(|&i| (data.items[i].feature.clone(), data.items[i].group.unwrap_or(u32::MAX)))
            .collect();
        let mut fallbacks = 0;
        let preds = bank
            .predict_many(&queries, k)
            .into_iter()
            .map(|r| match r {
                Ok(l) => Ok(l),
                Err(Error::Coverage(_)) | Err(Error::Degenerate(_)) => {
                    fallbacks += 1;
                    Ok(fallback)
                }
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<_>, Error>>()?;
        if fallbacks > 0 {
            log::info!("knn: {fallbacks} {split:?} item(s) fell back to the most frequent label");
        }
        out.insert(split, preds);
    }
    Ok(out)
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Feed-forward width (default 4 x dim).
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub vocab: usize,
    #[arg(long, default_value_t = 32)]
    pub max_pos: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "gelu", value_parser = crate::parse_activation)]
    pub activation: Activation,
    /// Leave out the embedding layer norm.
    #[arg(long)]
    pub no_initial_ln: bool,
    #[arg(long, default_value_t = 40)]
    pub sequences: usize,
    #[arg(long, default_value_t = 4)]
    pub min_len: usize,
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    /// Lemmas in the synthetic probe dataset.
    #[arg(long, default_value_t = 5)]
    pub lemmas: u32,
    /// Checkpoint dtype: f16, bf16, f32 or f64.
    #[arg(long, default_value = "f64")]
    pub dtype: String,
}

pub fn gen_toy(ctx: &Context, a: &GenToyArgs) -> Result<(), CliError> {
    let seed = pick(&a.seed, &ctx.file.seed).unwrap_or(0);
    let dtype: Dtype = a.dtype.parse().map_err(|e| CliError::usage(format!("--dtype: {e}")))?;
    if a.min_len == 0 || a.min_len > a.max_len || a.max_len > a.max_pos {
        return Err(CliError::usage(format!(
            "--min-len/--max-len: need 1 <= {} <= {} <= --max-pos {}",
            a.min_len, a.max_len, a.max_pos
        )));
    }
    if a.sequences == 0 {
        return Err(CliError::usage("--sequences must be positive"));
    }
    let mut spec = ToySpec::new(a.layers, a.dim, a.heads);
    spec.ff_dim = a.ff_dim.unwrap_or(4 * a.dim);
    spec.vocab = a.vocab;
    spec.max_pos = a.max_pos;
    spec.activation = a.activation;
    spec.initial_ln = !a.no_initial_ln;
    spec.config().validate().map_err(|e| CliError::usage(e.to_string()))?;
    let model = random_model(&spec, seed);
    let corpus: Vec<Sequence> = random_corpus(a.vocab, a.sequences, a.min_len..=a.max_len, seed.wrapping_add(1))
        .into_iter()
        .map(Sequence::new)
        .collect();
    let records = synthetic_records(&corpus, a.lemmas, seed.wrapping_add(2));

    let dir = ctx.out_dir("toy")?;
    let ckpt = dir.join("model.safetensors");
    save_checkpoint(&ckpt, &model.params, &model.config, &NameMap::default(), dtype).map_err(|e| at(&ckpt, e))?;
    let cfg = dir.join("config.json");
    save_config(&cfg, &model.config).map_err(|e| at(&cfg, e))?;
    let cpath = dir.join("corpus.txt");
    write_corpus(&cpath, &corpus).map_err(|e| at(&cpath, e))?;
    let dpath = dir.join("dataset.jsonl");
    write_records(&dpath, &records).map_err(|e| at(&dpath, e))?;
    println!(
        "wrote L={} d={} H={} model, {} sequences and {} probe records to {}",
        a.layers,
        a.dim,
        a.heads,
        corpus.len(),
        records.len(),
        dir.display()
    );
    Ok(())
}
