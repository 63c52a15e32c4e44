use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::anyhow;
use gbert::checks::{gradcheck_model, tiny_config, tiny_setup};
use gbert::config::{Paths, Precision, RunConfig};
use gbert::data::{generate_corpus, load_records, split_corpus, write_records, GeneratorConfig};
use gbert::eval::{threshold, MetricsReport, DEFAULT_THRESHOLD};
use gbert::finetune::{predict_records, VisitPrediction};
use gbert::model::{GBert, ModelMeta};
use gbert::numerics::{Checkpoint, GradCheckOptions, Primitive, Real};
use gbert::ontology::{CodeType, OntologyTree, PatientRecord, Visit};
use gbert::pretrain::PretrainEpochLog;
use gbert::schedule::{alternating_schedule, ScheduleState, Trainer, TrainingData};
use serde_json::json;

use crate::failure::{invalid, io, require, Failure};
use crate::overrides;
use crate::{EvalArgs, ExportArgs, GenerateArgs, GradcheckArgs, InferArgs, Overrides, TrainArgs};

pub const DX_TREE: &str = "dx.tree";
pub const RX_TREE: &str = "rx.tree";
pub const SPLITS: [&str; 4] = ["single", "train", "val", "test"];

fn split_file(name: &str) -> String {
    format!("{name}.jsonl")
}

/// Writes through a temporary file so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), gbert::Error> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| gbert::Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| gbert::Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn seed_value(seed: u64) -> Result<toml::Value, Failure> {
    i64::try_from(seed).map(toml::Value::Integer).map_err(|_| invalid(format!("seed {seed} is too large")))
}

/// Config file, then `--set` assignments, then dedicated flags.
fn layered_table(o: &Overrides) -> Result<toml::Table, Failure> {
    let mut table = overrides::load_table(o.config.as_deref())?;
    overrides::apply(&mut table, &o.set)?;
    if let Some(seed) = o.seed {
        table.insert("seed".into(), seed_value(seed)?);
    }
    Ok(table)
}

fn load_trees(data_dir: &Path) -> Result<(OntologyTree, OntologyTree), Failure> {
    let (dx, rx) = (data_dir.join(DX_TREE), data_dir.join(RX_TREE));
    require(&dx)?;
    require(&rx)?;
    Ok((OntologyTree::load(CodeType::Diagnosis, &dx)?, OntologyTree::load(CodeType::Medication, &rx)?))
}

fn load_split(data_dir: &Path, name: &str, dx: &OntologyTree, rx: &OntologyTree) -> Result<Vec<PatientRecord>, Failure> {
    if !SPLITS.contains(&name) {
        return Err(invalid(format!("unknown split {name:?}; expected one of {SPLITS:?}")));
    }
    let path = data_dir.join(split_file(name));
    require(&path)?;
    Ok(load_records(&path, dx, rx)?)
}

pub fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let config: GeneratorConfig = overrides::decode(layered_table(&a.overrides)?)?;
    config.validate()?;
    let ratios: [f64; 3] = a.ratios.as_slice().try_into().map_err(|_| invalid("--ratios takes three values"))?;
    let out = &a.out.out_dir;
    if is_nonempty_dir(out) && !a.force {
        return Err(invalid(format!("{} already exists and is not empty; pass --force to overwrite", out.display())));
    }
    let corpus = generate_corpus(&config)?;
    let split = split_corpus(&corpus.records, ratios, config.seed)?;
    create_dir(out)?;
    corpus.dx_tree.save(&out.join(DX_TREE))?;
    corpus.rx_tree.save(&out.join(RX_TREE))?;
    for (name, records) in SPLITS.iter().zip([&split.single, &split.train, &split.val, &split.test]) {
        write_records(&out.join(split_file(name)), records, &corpus.dx_tree, &corpus.rx_tree)?;
    }
    let manifest = serde_json::to_string_pretty(&split.manifest(config.seed, ratios)).expect("manifest serializes");
    write_text(&out.join("split.json"), &manifest)?;
    write_text(&out.join("generator.toml"), &toml::to_string_pretty(&config).map_err(|e| invalid(e.to_string()))?)?;
    log::info!(
        "wrote {} single-visit and {}/{}/{} train/val/test patients to {}",
        split.single.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        out.display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut table = layered_table(&a.overrides)?;
    let mut flags = Vec::new();
    if let Some(p) = &a.precision {
        flags.push(format!("precision=\"{p}\""));
    }
    if a.no_graph {
        flags.push("ablation.no_graph=true".into());
    }
    if a.no_pretrain {
        flags.push("ablation.no_pretrain=true".into());
    }
    overrides::apply(&mut table, &flags)?;
    let mut config: RunConfig = overrides::decode(table)?;
    let out = &a.out.out_dir;
    config.paths = Paths {
        data_dir: Some(a.data_dir.display().to_string()),
        out_dir: Some(out.display().to_string()),
        checkpoint: Some(out.join("best.ckpt").display().to_string()),
    };
    Ok(config.resolved()?)
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let config = train_config(&a)?;
    let (dx, rx) = load_trees(&a.data_dir)?;
    let single = load_split(&a.data_dir, "single", &dx, &rx)?;
    let train = load_split(&a.data_dir, "train", &dx, &rx)?;
    let val = load_split(&a.data_dir, "val", &dx, &rx)?;
    let out = &a.out.out_dir;
    let previous = out.join("last.ckpt").exists() || out.join("best.ckpt").exists();
    if a.resume {
        require(&out.join("last.ckpt"))?;
        require(&out.join("best.ckpt"))?;
    } else if previous && !a.force {
        return Err(invalid(format!("{} holds a previous run; pass --resume or --force", out.display())));
    }
    create_dir(out)?;
    let data = Corpus { dx: &dx, rx: &rx, single: &single, train: &train, val: &val };
    match config.precision {
        Precision::F64 => run_training::<f64>(&config, &data, out, a.resume),
        Precision::F32 => run_training::<f32>(&config, &data, out, a.resume),
    }
}

struct Corpus<'a> {
    dx: &'a OntologyTree,
    rx: &'a OntologyTree,
    single: &'a [PatientRecord],
    train: &'a [PatientRecord],
    val: &'a [PatientRecord],
}

/// Adds run identity (config fingerprint, seed, variant, threshold) to a
/// checkpoint's metadata.
fn stamp<T: Real>(mut ck: Checkpoint<T>, run: &serde_json::Value) -> Checkpoint<T> {
    let mut meta: serde_json::Value = serde_json::from_str(&ck.metadata).expect("checkpoint metadata is JSON");
    meta["extra"]["run"] = run.clone();
    ck.metadata = meta.to_string();
    ck
}

fn run_info(metadata: &str) -> serde_json::Value {
    serde_json::from_str::<serde_json::Value>(metadata).ok().map(|m| m["extra"]["run"].clone()).unwrap_or_default()
}

fn save_checkpoint<T: Real>(ck: &Checkpoint<T>, path: &Path) -> Result<(), gbert::Error> {
    write_atomic(path, &ck.to_bytes())
}

fn write_logs(out: &Path, state: &ScheduleState) -> Result<(), gbert::Error> {
    let mut pre = format!("{}\n", PretrainEpochLog::CSV_HEADER);
    let mut cycles = String::from("cycle,pretrain_epochs,finetune_epochs,finetune_loss,val_jaccard,val_f1,val_pr_auc,best\n");
    for c in &state.history {
        for e in &c.pretrain {
            pre.push_str(&e.csv_row());
            pre.push('\n');
        }
        let loss = c.finetune_loss.last().copied().unwrap_or(f64::NAN);
        cycles.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.cycle,
            c.pretrain.len(),
            c.finetune_loss.len(),
            loss,
            c.val_jaccard,
            c.val_f1,
            c.val_pr_auc,
            c.best
        ));
    }
    write_atomic(&out.join("pretrain_log.csv"), pre.as_bytes())?;
    write_atomic(&out.join("cycles.csv"), cycles.as_bytes())
}

/// Fingerprint of everything but the cycle count, which a resumed run may extend.
fn resume_key(config: &RunConfig) -> String {
    let mut c = config.clone();
    c.train.cycles = 1;
    c.fingerprint()
}

fn run_training<T: Real>(config: &RunConfig, data: &Corpus<'_>, out: &Path, resume: bool) -> Result<(), Failure> {
    let fingerprint = config.fingerprint();
    let key = resume_key(config);
    let run = json!({
        "fingerprint": fingerprint,
        "resume_key": key,
        "seed": config.seed,
        "variant": config.ablation.variant(),
        "threshold": config.train.threshold,
    });
    let mut trainer = if resume {
        let last = Checkpoint::<T>::load(&out.join("last.ckpt"))?;
        let best = Checkpoint::<T>::load(&out.join("best.ckpt"))?;
        let stored = run_info(&last.metadata);
        if stored["resume_key"].as_str() != Some(key.as_str()) {
            return Err(invalid("configuration differs from the run being resumed (only train.cycles may change)"));
        }
        let t = Trainer::resume(&last, &best, data.dx, data.rx)?;
        log::info!("resuming after cycle {}/{}", t.state.cycles_done, config.train.cycles);
        t
    } else {
        Trainer::new(GBert::new(config.model, data.dx, data.rx, config.seed)?, config.train.adam())
    };
    write_text(&out.join("config.toml"), &config.to_toml())?;
    let pool: Vec<Visit> = data.single.iter().chain(data.train).flat_map(|r| r.visits.iter().cloned()).collect();
    log::info!(
        "{} ({}): {} pre-training visits, {} train / {} val patients, {} parameters",
        config.ablation.variant(),
        T::NAME,
        pool.len(),
        data.train.len(),
        data.val.len(),
        trainer.model.store.ids().map(|id| trainer.model.store.value(id).data().len()).sum::<usize>()
    );
    let schedule = config.schedule();
    let sets = TrainingData { pretrain: &pool, train: data.train, val: data.val };
    alternating_schedule(&mut trainer, &sets, &schedule, |t, c| {
        // Best first: once last.ckpt records a cycle, best.ckpt already reflects it.
        save_checkpoint(&stamp(t.best_checkpoint(), &run), &out.join("best.ckpt"))?;
        save_checkpoint(&stamp(t.last_checkpoint(), &run), &out.join("last.ckpt"))?;
        write_logs(out, &t.state)?;
        let pr = c.pretrain.last().map(|p| format!("L_pr {:.4}, ", p.total)).unwrap_or_default();
        log::info!(
            "cycle {}/{}: {pr}fine-tune loss {:.4}, val Jaccard {:.4} F1 {:.4} PR-AUC {:.4}{}",
            c.cycle,
            schedule.cycles,
            c.finetune_loss.last().copied().unwrap_or(f64::NAN),
            c.val_jaccard,
            c.val_f1,
            c.val_pr_auc,
            if c.best { " (best)" } else { "" }
        );
        Ok(())
    })?;
    write_logs(out, &trainer.state)?;
    let st = &trainer.state;
    let summary = json!({
        "variant": config.ablation.variant(),
        "config_fingerprint": fingerprint,
        "seed": config.seed,
        "precision": T::NAME,
        "cycles": st.cycles_done,
        "pretrain_epochs": st.pretrain_epochs_run,
        "finetune_epochs": st.finetune_epochs_run,
        "best_cycle": st.best_cycle.map(|c| c + 1),
        "best_val_jaccard": st.best_val_jaccard,
    });
    write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    log::info!("best cycle {:?} with val Jaccard {:?}", st.best_cycle.map(|c| c + 1), st.best_val_jaccard);
    Ok(())
}

/// A checkpointed model at whichever precision it was trained in.
enum Loaded {
    F64(GBert<f64>),
    F32(GBert<f32>),
}

impl Loaded {
    fn open(path: &Path, dx: &OntologyTree, rx: &OntologyTree) -> Result<(Self, ModelMeta, serde_json::Value), Failure> {
        require(path)?;
        let ck = Checkpoint::<f64>::load(path)?;
        let run = run_info(&ck.metadata);
        let precision = serde_json::from_str::<ModelMeta>(&ck.metadata).map(|m| m.precision).unwrap_or_default();
        Ok(if precision == "f32" {
            let (model, meta) = GBert::<f32>::from_checkpoint(&Checkpoint::<f32>::load(path)?, dx, rx)?;
            (Loaded::F32(model), meta, run)
        } else {
            let (model, meta) = GBert::from_checkpoint(&ck, dx, rx)?;
            (Loaded::F64(model), meta, run)
        })
    }

    fn predict(&self, records: &[PatientRecord], batch: usize) -> Result<Vec<VisitPrediction>, Failure> {
        Ok(match self {
            Loaded::F64(m) => predict_records(m, records, batch)?,
            Loaded::F32(m) => predict_records(m, records, batch)?,
        })
    }

    fn leaf_embeddings(&self, kind: CodeType) -> Result<Vec<Vec<f64>>, Failure> {
        Ok(match self {
            Loaded::F64(m) => m.leaf_embeddings(kind)?,
            Loaded::F32(m) => m.leaf_embeddings(kind)?,
        })
    }
}

fn resolve_threshold(flag: Option<f64>, run: &serde_json::Value) -> Result<f64, Failure> {
    let t = flag.or_else(|| run["threshold"].as_f64()).unwrap_or(DEFAULT_THRESHOLD);
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("threshold {t} outside [0, 1]")));
    }
    Ok(t)
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    if a.batch_size == 0 {
        return Err(invalid("--batch-size must be positive"));
    }
    let (dx, rx) = load_trees(&a.data_dir)?;
    let records = load_split(&a.data_dir, &a.split, &dx, &rx)?;
    let (model, _, run) = Loaded::open(&a.checkpoint, &dx, &rx)?;
    let thr = resolve_threshold(a.threshold, &run)?;
    let preds = model.predict(&records, a.batch_size)?;
    let fingerprint = run["fingerprint"].as_str().unwrap_or("unknown").to_string();
    let report = MetricsReport::from_predictions(&preds, thr, fingerprint, run["seed"].as_u64().unwrap_or(0));
    create_dir(&a.out.out_dir)?;
    write_text(&a.out.out_dir.join("report.json"), &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    write_text(&a.out.out_dir.join("report.csv"), &report.csv())?;
    println!(
        "{} split: Jaccard {:.4}  F1 {:.4}  PR-AUC {:.4}  ({} patients, {} visits)",
        a.split, report.jaccard, report.f1, report.pr_auc, report.patients, report.visits
    );
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let corrupt = match &a.corrupt {
        Some(name) => Some(Primitive::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = Primitive::ALL.iter().map(|p| p.name()).collect();
            invalid(format!("unknown primitive {name:?}; expected one of {}", known.join(", ")))
        })?),
        None => None,
    };
    if !(a.tol > 0.0) {
        return Err(invalid("--tol must be positive"));
    }
    create_dir(&a.out.out_dir)?;
    let start = Instant::now();
    let setup = tiny_setup(tiny_config(), a.seed)?;
    let opts = GradCheckOptions { tol: a.tol, max_entries: a.max_entries, corrupt, ..Default::default() };
    let report = gradcheck_model(&setup, &opts)?;
    let seconds = start.elapsed().as_secs_f64();
    let passed = report.passed();
    let doc = json!({
        "passed": passed,
        "seconds": seconds,
        "seed": a.seed,
        "corrupt": a.corrupt,
        "pretrain": report.pretrain,
        "finetune": report.finetune,
    });
    write_text(&a.out.out_dir.join("gradcheck.json"), &serde_json::to_string_pretty(&doc).expect("report serializes"))?;
    println!(
        "L_pr max rel error {:.3e}, fine-tune max rel error {:.3e} (tol {:.0e}, {seconds:.1}s): {}",
        report.pretrain.max_rel_error(),
        report.finetune.max_rel_error(),
        a.tol,
        if passed { "PASS" } else { "FAIL" }
    );
    if passed {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!(
            "gradient check failed for {} parameters under L_pr and {} under the fine-tune loss; details in gradcheck.json",
            report.pretrain.failures().count(),
            report.finetune.failures().count()
        )))
    }
}

fn embeddings_tsv(tree: &OntologyTree, rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        out.push_str(tree.leaf_label(i));
        for v in row {
            out.push('\t');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn export_embeddings(a: ExportArgs) -> Result<(), Failure> {
    let (dx, rx) = load_trees(&a.data_dir)?;
    let (model, _, _) = Loaded::open(&a.checkpoint, &dx, &rx)?;
    create_dir(&a.out.out_dir)?;
    for (tree, file) in [(&dx, "dx_embeddings.tsv"), (&rx, "rx_embeddings.tsv")] {
        let rows = model.leaf_embeddings(tree.code_type())?;
        write_text(&a.out.out_dir.join(file), &embeddings_tsv(tree, &rows))?;
    }
    log::info!("wrote {} diagnosis and {} medication embeddings", dx.leaf_count(), rx.leaf_count());
    Ok(())
}

pub fn infer(a: InferArgs) -> Result<(), Failure> {
    if a.top_k == 0 {
        return Err(invalid("--top-k must be positive"));
    }
    let (dx, rx) = load_trees(&a.data_dir)?;
    require(&a.records)?;
    let records = load_records(&a.records, &dx, &rx)?;
    let (model, _, run) = Loaded::open(&a.checkpoint, &dx, &rx)?;
    let thr = resolve_threshold(a.threshold, &run)?;
    let preds = model.predict(&records, 64)?;
    let mut lines = String::new();
    for p in &preds {
        let mut order: Vec<usize> = (0..p.probs.len()).collect();
        order.sort_by(|&i, &j| p.probs[j].total_cmp(&p.probs[i]).then(i.cmp(&j)));
        let top: Vec<serde_json::Value> =
            order.iter().take(a.top_k).map(|&i| json!({ "code": rx.leaf_label(i), "prob": p.probs[i] })).collect();
        let predicted: Vec<&str> = threshold(&p.probs, thr).into_iter().map(|i| rx.leaf_label(i)).collect();
        lines.push_str(&json!({ "pid": p.pid, "t": p.t, "top": top, "predicted": predicted }).to_string());
        lines.push('\n');
    }
    create_dir(&a.out.out_dir)?;
    write_text(&a.out.out_dir.join("predictions.jsonl"), &lines)?;
    let skipped = records.iter().filter(|r| r.visits.len() < 2).count();
    log::info!("{} visit predictions; {skipped} single-visit records have no history and were skipped", preds.len());
    Ok(())
}
