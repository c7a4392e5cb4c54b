//! One function per subcommand. Each writes its outputs into a [`RunDir`]
//! and finishes with the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use kbmem::eval::{evaluate_dataset, EvalMode, EvalReport};
use kbmem::kb::{Axis, OccurrenceIndex};
use kbmem::memorizer::vocab::split_words;
use kbmem::memorizer::{Parameters, TemplateTable, Vocab};
use kbmem::probes::{
    eval_probeset, gen_composition, gen_inverse, load_missing_facts, membership_violations, ProbeSet,
};
use kbmem::trainer::{
    compare_convergence, eval_items, memorization_task, qa_finetune, Curve, Example, Mode, RunOutcome,
    Trainer,
};
use kbmem::{Checkpoint, Error, KnowledgeBase};
use serde_json::json;

use crate::args::{CompareArgs, EvalArgs, IngestArgs, ProbesArgs, QaArgs, TrainArgs};
use crate::config::{open, ExperimentConfig};
use crate::manifest::{Manifest, RunDir};
use crate::pipeline::{self, LoadedKb};

fn write_counts(run: &mut RunDir, index: &OccurrenceIndex) -> Result<()> {
    run.write("entity_counts.tsv", |w| Ok(index.write_tsv(w, Axis::Entity)?))?;
    run.write("relation_counts.tsv", |w| Ok(index.write_tsv(w, Axis::Relation)?))?;
    run.count("entities", index.counts(Axis::Entity).len());
    run.count("relations", index.counts(Axis::Relation).len());
    Ok(())
}

fn write_kb(run: &mut RunDir, kb: &KnowledgeBase) -> Result<()> {
    run.write("kb.tsv", |w| Ok(kbmem::kb::write_triplets_tsv(w, kb.triplets())?))?;
    run.count("kb_triplets", kb.len());
    write_counts(run, &kb.occurrence_counts())
}

/// Loads the KB and records its provenance in the manifest.
fn open_kb(run: &mut RunDir, cfg: &ExperimentConfig) -> Result<LoadedKb> {
    if let Some(p) = &cfg.kb {
        run.input(p)?;
    }
    run.stage_seed("kb");
    let loaded = pipeline::load_kb(cfg)?;
    if loaded.kb.is_empty() {
        bail!("the knowledge base is empty");
    }
    run.count("kb_triplets", loaded.kb.len());
    Ok(loaded)
}

fn record_rule_inputs(run: &mut RunDir, cfg: &ExperimentConfig) -> Result<()> {
    for p in [&cfg.templates, &cfg.relation_alias, &cfg.inverse_rules, &cfg.composition_rules]
        .into_iter()
        .flatten()
    {
        run.input(p)?;
    }
    Ok(())
}

fn load_checkpoint(run: &mut RunDir, path: &Path) -> Result<Checkpoint> {
    run.input(path)?;
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn save_checkpoint(run: &mut RunDir, name: &str, ckpt: &Checkpoint) -> Result<()> {
    ckpt.save(&run.path(name))?;
    run.register(name);
    Ok(())
}

fn write_curve(run: &mut RunDir, name: &str, curve: &Curve) -> Result<()> {
    run.write(name, |w| Ok(curve.write_csv(w)?))?;
    run.register_unhashed(name);
    Ok(())
}

fn write_json(run: &mut RunDir, name: &str, value: &serde_json::Value) -> Result<()> {
    run.write(name, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })?;
    Ok(())
}

fn write_report(run: &mut RunDir, stem: &str, report: &EvalReport) -> Result<()> {
    run.write(&format!("{stem}.json"), |w| Ok(report.write_json(w)?))?;
    Ok(())
}

fn write_samples(run: &mut RunDir, name: &str, report: &EvalReport) -> Result<()> {
    run.write(name, |w| Ok(report.write_tsv(w)?))?;
    Ok(())
}

pub fn ingest(mut cfg: ExperimentConfig, args: &IngestArgs, out: PathBuf) -> Result<Manifest> {
    if let Some(input) = &args.input {
        cfg.kb = Some(input.clone());
        cfg.synth = None;
    }
    if let Some(a) = &args.allowlist {
        cfg.filters.subject_allowlist = Some(a.clone());
    }
    let input = cfg.kb.clone().ok_or_else(|| anyhow!("ingest needs --input or `kb` in the config"))?;
    if !input.is_file() {
        bail!("input dump not found: {}", input.display());
    }
    cfg.validate()?;
    let mut run = RunDir::create(out, "ingest", &cfg)?;
    run.input(&input)?;
    if let Some(a) = &cfg.filters.subject_allowlist {
        run.input(a)?;
    }
    let (triplets, report) = pipeline::read_dump(&input, &cfg)?;
    let raw = triplets.len();
    let kb = KnowledgeBase::build(triplets, run.stage_seed("kb"));
    run.count("lines", report.lines);
    run.count("kept", report.kept);
    run.count("skipped", report.malformed);
    run.count("dropped", &report.dropped);
    run.count("deduplicated_away", raw - kb.len());
    write_kb(&mut run, &kb)?;
    run.write("filter_log.tsv", |w| Ok(report.write_log(w)?))?;
    if kb.is_empty() {
        run.note("the filtered knowledge base is empty");
    }
    log::info!(
        "ingest: {} lines, {} kept, {} skipped, {} triplets after dedup",
        report.lines,
        report.kept,
        report.malformed,
        kb.len()
    );
    run.finish()
}

pub fn synth(mut cfg: ExperimentConfig, out: PathBuf) -> Result<Manifest> {
    if cfg.kb.is_some() {
        bail!("synth generates its own KB; drop `kb` from the config");
    }
    cfg.synth.get_or_insert_with(Default::default);
    cfg.validate()?;
    let mut run = RunDir::create(out, "synth", &cfg)?;
    let loaded = open_kb(&mut run, &cfg)?;
    run.count("raw_triplets", loaded.raw);
    write_kb(&mut run, &loaded.kb)?;
    log::info!("synth: {} raw triplets, {} after dedup", loaded.raw, loaded.kb.len());
    run.finish()
}

pub fn strata(cfg: ExperimentConfig, out: PathBuf) -> Result<Manifest> {
    cfg.validate()?;
    let mut run = RunDir::create(out, "strata", &cfg)?;
    let loaded = open_kb(&mut run, &cfg)?;
    for spec in &cfg.strata {
        run.stage_seed(&format!("strata/{}", spec.name()));
    }
    let strata = pipeline::strata(&loaded.kb, &cfg)?;
    let mut summary = BTreeMap::new();
    for (spec, s) in cfg.strata.iter().zip(&strata) {
        let name = spec.name();
        run.write(&format!("D_{name}.tsv"), |w| pipeline::write_dataset(w, &s.dataset))?;
        summary.insert(
            name.clone(),
            json!({
                "available": s.available,
                "sampled": s.dataset.len(),
                "sample_size": spec.sample_size,
                "qualifying": s.qualifying.len(),
                "percentile": spec.percentile,
            }),
        );
        if s.under_supplied(spec) {
            run.note(format!(
                "stratum {name}: only {} triplets available for a sample of {}",
                s.available, spec.sample_size
            ));
        }
    }
    run.count("strata", summary);
    run.finish()
}

fn checkpoint_for(params: Parameters, vocab: &Vocab, state: Option<kbmem::trainer::TrainState>, cfg: &kbmem::trainer::TrainConfig, note: String) -> Checkpoint {
    let mut c = Checkpoint::new(params, vocab.clone());
    if let Some(s) = state {
        c = c.with_state(s, cfg.clone());
    }
    c.note = Some(note);
    c
}

fn run_summary(outcome: &RunOutcome, trainer: &Trainer<'_>) -> serde_json::Value {
    let last = outcome.curve.last();
    json!({
        "stop": outcome.stop,
        "final_step": trainer.state.step,
        "final_epoch": trainer.state.epoch,
        "final_em": last.map(|p| p.em),
        "final_f1": last.map(|p| p.f1),
        "best_f1": trainer.state.best_f1,
        "best_step": trainer.state.best_step,
    })
}

pub fn train(mut cfg: ExperimentConfig, args: &TrainArgs, out: PathBuf) -> Result<Manifest> {
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    let mode = Mode::from(args.mode);
    let mut run = RunDir::create(out, "train", &cfg)?;
    run.arg("mode", mode.name());
    let loaded = open_kb(&mut run, &cfg)?;
    record_rule_inputs(&mut run, &cfg)?;
    let kb = &loaded.kb;
    let vocab = pipeline::vocab(kb, &cfg)?;
    run.stage_seed("eval");
    let eval = pipeline::eval_set(kb, &cfg);
    let (examples, items) = memorization_task(&pipeline::whole(kb), &eval);
    run.count("train_items", examples.len());
    run.count("eval_items", items.len());
    run.count("vocab", vocab.len());

    let mut prior = Curve::default();
    let mut trainer = match &args.resume {
        Some(path) => {
            run.arg("resume", path.display().to_string());
            let ckpt = load_checkpoint(&mut run, path)?;
            if ckpt.vocab != vocab {
                bail!("checkpoint {} was trained on a different vocabulary", path.display());
            }
            ckpt.expect_config(&cfg.model.with_vocab(vocab.len()))?;
            let state = ckpt
                .state
                .ok_or_else(|| anyhow!("checkpoint {} holds no training state", path.display()))?;
            let old = run.path("curve.csv");
            if old.is_file() {
                let curve = Curve::read_csv(open(&old)?)?;
                for p in curve.points.into_iter().filter(|p| p.step <= state.step) {
                    prior.push(p)?;
                }
            }
            Trainer::resume(ckpt.params, state, &vocab, &examples, cfg.train.clone())?
        }
        None => {
            run.stage_seed("init");
            let params = pipeline::init_params(&vocab, &cfg, "init")?;
            Trainer::new(params, &vocab, &examples, cfg.train.clone())?
        }
    };
    let offset = prior.last().map_or(0.0, |p| p.seconds);
    let outcome = match trainer.run(mode, &items, offset) {
        Ok(o) => o,
        Err(e @ Error::NonFiniteLoss { .. }) => {
            let ckpt = checkpoint_for(
                trainer.params.clone(),
                &vocab,
                Some(trainer.state.clone()),
                &cfg.train,
                format!("diagnostic: {e}"),
            );
            save_checkpoint(&mut run, "diagnostic.ckpt", &ckpt)?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let mut curve = prior;
    for p in outcome.curve.points.iter().cloned() {
        curve.push(p)?;
    }
    run.write("eval_set.tsv", |w| pipeline::write_dataset(w, &eval))?;
    write_curve(&mut run, "curve.csv", &curve)?;
    if let Some((params, state)) = outcome.best.clone() {
        let note = format!("{} memorization, best eval F1 at step {}", mode.name(), state.step);
        let ckpt = checkpoint_for(params, &vocab, Some(state), &cfg.train, note);
        save_checkpoint(&mut run, "best.ckpt", &ckpt)?;
    }
    let note = format!("{} memorization, last step {}", mode.name(), trainer.state.step);
    let ckpt = checkpoint_for(trainer.params.clone(), &vocab, Some(trainer.state.clone()), &cfg.train, note);
    save_checkpoint(&mut run, "last.ckpt", &ckpt)?;
    let mut summary = run_summary(&outcome, &trainer);
    summary["mode"] = json!(mode.name());
    write_json(&mut run, "summary.json", &summary)?;
    log::info!("train: stopped ({:?}) at step {}", outcome.stop, trainer.state.step);
    run.finish()
}

pub fn compare(mut cfg: ExperimentConfig, args: &CompareArgs, out: PathBuf) -> Result<Manifest> {
    if !args.thresholds.is_empty() {
        cfg.thresholds = args.thresholds.clone();
    }
    if cfg.thresholds.is_empty() {
        bail!("compare needs at least one threshold");
    }
    cfg.train.seed = cfg.seed;
    // both arms stop once the highest reported threshold is reached
    cfg.train.em_stop_threshold = cfg.thresholds.iter().cloned().fold(f64::MIN, f64::max);
    cfg.validate()?;
    let mut run = RunDir::create(out, "compare", &cfg)?;
    let loaded = open_kb(&mut run, &cfg)?;
    record_rule_inputs(&mut run, &cfg)?;
    let kb = &loaded.kb;
    let vocab = pipeline::vocab(kb, &cfg)?;
    run.stage_seed("eval");
    run.stage_seed("init");
    let eval = pipeline::eval_set(kb, &cfg);
    let (examples, items) = memorization_task(&pipeline::whole(kb), &eval);
    let init = pipeline::init_params(&vocab, &cfg, "init")?;
    let cmp = compare_convergence(&init, &vocab, &examples, &items, &cfg.train, &cfg.thresholds)?;

    run.write("eval_set.tsv", |w| pipeline::write_dataset(w, &eval))?;
    write_curve(&mut run, "curve_importance.csv", &cmp.importance.curve)?;
    write_curve(&mut run, "curve_uniform.csv", &cmp.uniform.curve)?;
    for (mode, outcome) in [(Mode::Importance, &cmp.importance), (Mode::Uniform, &cmp.uniform)] {
        if let Some((params, state)) = outcome.best.clone() {
            let note = format!("{} arm, best eval F1 at step {}", mode.name(), state.step);
            let ckpt = checkpoint_for(params, &vocab, Some(state), &cfg.train, note);
            save_checkpoint(&mut run, &format!("{}_best.ckpt", mode.name()), &ckpt)?;
        }
    }
    let steps_to: BTreeMap<&str, _> = cmp.summary.iter().map(|s| (s.mode.name(), &s.steps_to)).collect();
    let summary = json!({
        "seed": cfg.seed,
        "thresholds": cfg.thresholds,
        "steps_to": steps_to,
        "arms": cmp.summary,
    });
    write_json(&mut run, "summary.json", &summary)?;
    run.finish()
}

fn unknown_words(vocab: &Vocab, examples: &[Example]) -> usize {
    examples
        .iter()
        .flat_map(|e| split_words(&e.prompt).into_iter().chain(split_words(&e.target)))
        .filter(|w| vocab.id(w).is_none())
        .count()
}

pub fn qa(mut cfg: ExperimentConfig, args: &QaArgs, out: PathBuf) -> Result<Manifest> {
    cfg.qa.seed = cfg.seed;
    cfg.validate()?;
    let mut run = RunDir::create(out, "qa", &cfg)?;
    let loaded = match (&args.qa_tsv, cfg.source()) {
        (Some(_), Err(_)) => None,
        _ => Some(open_kb(&mut run, &cfg)?),
    };
    record_rule_inputs(&mut run, &cfg)?;
    let data = match &args.qa_tsv {
        Some(path) => {
            run.input(path)?;
            run.stage_seed("qa-split");
            let pairs = pipeline::read_qa_tsv(path)?;
            if pairs.is_empty() {
                bail!("no question-answer pairs in {}", path.display());
            }
            pipeline::split_qa(pairs, &cfg)
        }
        None => {
            run.stage_seed("qa-data");
            run.stage_seed("qa-split");
            pipeline::qa_data(&loaded.as_ref().expect("KB loaded").kb, &cfg)?
        }
    };
    run.count("qa_train", data.train.len());
    run.count("qa_val", data.val.len());

    let (params, vocab, init) = match &args.checkpoint {
        Some(path) => {
            run.arg("checkpoint", path.display().to_string());
            let ckpt = load_checkpoint(&mut run, path)?;
            (ckpt.params, ckpt.vocab, "checkpoint")
        }
        None => {
            run.arg("fresh", true);
            let vocab = match &loaded {
                Some(l) => pipeline::vocab(&l.kb, &cfg)?,
                None => Vocab::build(
                    data.train
                        .iter()
                        .chain(&data.val)
                        .flat_map(|e| [e.prompt.as_str(), e.target.as_str()]),
                )?,
            };
            run.stage_seed("qa-init");
            (pipeline::init_params(&vocab, &cfg, "qa-init")?, vocab, "fresh")
        }
    };
    let unknown = unknown_words(&vocab, &data.train) + unknown_words(&vocab, &data.val);
    if unknown > 0 {
        run.note(format!("{unknown} question/answer words are outside the model vocabulary"));
    }
    run.write("qa_train.tsv", |w| pipeline::write_qa_tsv(w, &data.train))?;
    run.write("qa_val.tsv", |w| pipeline::write_qa_tsv(w, &data.val))?;

    let val_items = eval_items(&data.val);
    let (outcome, final_params) = qa_finetune(params, &vocab, &data.train, &val_items, cfg.qa.clone())?;
    write_curve(&mut run, "curve.csv", &outcome.curve)?;
    if let Some((params, state)) = outcome.best.clone() {
        let note = format!("question finetuning from {init}, best validation F1 at step {}", state.step);
        save_checkpoint(&mut run, "best.ckpt", &checkpoint_for(params, &vocab, Some(state), &cfg.qa, note))?;
    }
    let note = format!("question finetuning from {init}, final");
    save_checkpoint(&mut run, "final.ckpt", &checkpoint_for(final_params, &vocab, None, &cfg.qa, note))?;
    let summary = json!({
        "init": init,
        "stop": outcome.stop,
        "best_f1": outcome.curve.best_f1(),
        "final_f1": outcome.curve.last().map(|p| p.f1),
        "final_step": outcome.curve.last().map(|p| p.step),
    });
    write_json(&mut run, "summary.json", &summary)?;
    run.finish()
}

/// Templates for question-mode scoring: from the KB when one is configured,
/// otherwise keyed on the relations being queried.
fn question_templates<'a>(
    cfg: &ExperimentConfig,
    kb: Option<&KnowledgeBase>,
    relations: impl IntoIterator<Item = &'a str>,
) -> Result<TemplateTable> {
    match kb {
        Some(kb) => pipeline::templates(kb, cfg),
        None => {
            let mut rels: Vec<&str> = relations.into_iter().collect();
            rels.sort_unstable();
            rels.dedup();
            cfg.template_table(rels)
        }
    }
}

pub fn eval(cfg: ExperimentConfig, args: &EvalArgs, out: PathBuf) -> Result<Manifest> {
    cfg.validate()?;
    let mode = EvalMode::from(args.mode);
    let mut run = RunDir::create(out, "eval", &cfg)?;
    run.arg("mode", mode);
    run.arg("checkpoint", args.checkpoint.display().to_string());
    let ckpt = load_checkpoint(&mut run, &args.checkpoint)?;
    let loaded = match &args.dataset {
        Some(_) if cfg.source().is_err() => None,
        _ => Some(open_kb(&mut run, &cfg)?),
    };
    record_rule_inputs(&mut run, &cfg)?;
    let dataset = match &args.dataset {
        Some(path) => {
            run.input(path)?;
            run.arg("dataset", path.display().to_string());
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
            pipeline::read_dataset(path, name)?
        }
        None => {
            run.stage_seed("eval");
            pipeline::eval_set(&loaded.as_ref().expect("KB loaded").kb, &cfg)
        }
    };
    let mut strata = Vec::new();
    if let Some(dir) = &args.strata_dir {
        run.arg("strata_dir", dir.display().to_string());
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("D_") && n.ends_with(".tsv"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            bail!("no D_<name>.tsv strata in {}", dir.display());
        }
        for f in files {
            run.input(&f)?;
            let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            strata.push(pipeline::read_dataset(&f, stem.trim_start_matches("D_"))?);
        }
    }
    let templates = match mode {
        EvalMode::Triplet => None,
        EvalMode::Question => Some(question_templates(
            &cfg,
            loaded.as_ref().map(|l| &l.kb),
            dataset.triplets.iter().chain(strata.iter().flat_map(|s| &s.triplets)).map(|t| t.relation()),
        )?),
    };
    let report = evaluate_dataset(&ckpt.params, &ckpt.vocab, &dataset, mode, templates.as_ref(), &strata)?;
    write_report(&mut run, "report", &report)?;
    write_samples(&mut run, "samples.tsv", &report)?;
    run.count("n", report.n);
    run.count("em", report.em);
    run.count("f1", report.f1);
    log::info!("eval: n={} em={:.4} f1={:.4}", report.n, report.em, report.f1);
    run.finish()
}

pub fn probes(cfg: ExperimentConfig, args: &ProbesArgs, out: PathBuf) -> Result<Manifest> {
    cfg.validate()?;
    let mode = EvalMode::from(args.mode);
    let generate = cfg.source().is_ok();
    if !generate && args.probes.is_empty() && args.missing_facts.is_none() {
        bail!("probes needs a KB to generate from, --probes files or --missing-facts");
    }
    let mut run = RunDir::create(out, "probes", &cfg)?;
    run.arg("mode", mode);
    let loaded = if generate { Some(open_kb(&mut run, &cfg)?) } else { None };
    record_rule_inputs(&mut run, &cfg)?;

    let mut sets: Vec<ProbeSet> = Vec::new();
    if let Some(l) = &loaded {
        let seed = run.stage_seed("probes");
        let inv = gen_inverse(&l.kb, &cfg.inverse_rules()?, cfg.per_rule, seed)?;
        let comp = gen_composition(&l.kb, &cfg.composition_rules()?, cfg.per_rule, seed)?;
        let mut violations = 0;
        for set in [&inv.first, &inv.second, &comp.first, &comp.second] {
            violations += membership_violations(&l.kb, set).len();
        }
        if violations > 0 {
            bail!("{violations} generated probes violate the KB membership constraints");
        }
        run.count("membership_violations", violations);
        run.write("inverse.tsv", |w| {
            inv.first.write_tsv(&mut *w)?;
            inv.second.write_tsv(&mut *w)?;
            Ok(())
        })?;
        run.write("composition.tsv", |w| {
            comp.first.write_tsv(&mut *w)?;
            comp.second.write_tsv(&mut *w)?;
            Ok(())
        })?;
        for (pair, name) in [(&inv, "inverse"), (&comp, "composition")] {
            for s in &pair.supply {
                if s.sampled < cfg.per_rule {
                    run.note(format!(
                        "{name} rule {}: {} items for a quota of {} (pool {}, {} duplicates)",
                        s.rule_id, s.sampled, cfg.per_rule, s.pool, s.duplicates
                    ));
                }
            }
        }
        write_json(
            &mut run,
            "supply.json",
            &json!({"inverse": inv.supply, "composition": comp.supply}),
        )?;
        sets.extend([inv.first, inv.second, comp.first, comp.second]);
    }
    for path in &args.probes {
        run.input(path)?;
        sets.extend(ProbeSet::read_tsv(open(path)?)?);
    }
    if let Some(path) = &args.missing_facts {
        run.input(path)?;
        let (set, log) = load_missing_facts(open(path)?)?;
        for e in &log {
            run.note(format!("missing-facts line {}: {}", e.line, e.reason));
        }
        sets.push(set);
    }
    let mut sizes = BTreeMap::new();
    for s in &sets {
        *sizes.entry(s.kind.name().to_string()).or_insert(0usize) += s.len();
    }
    run.count("items", &sizes);

    if let Some(path) = &args.checkpoint {
        run.arg("checkpoint", path.display().to_string());
        let ckpt = load_checkpoint(&mut run, path)?;
        let templates = match mode {
            EvalMode::Triplet => None,
            EvalMode::Question => Some(question_templates(
                &cfg,
                loaded.as_ref().map(|l| &l.kb),
                sets.iter().flat_map(|s| &s.items).map(|i| i.relation.as_str()),
            )?),
        };
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        let mut overview = BTreeMap::new();
        for set in sets.iter().filter(|s| !s.is_empty()) {
            let k = seen.entry(set.kind.name()).or_insert(0);
            *k += 1;
            let stem = if *k == 1 {
                set.kind.name().to_string()
            } else {
                format!("{}_{k}", set.kind.name())
            };
            let report = eval_probeset(&ckpt.params, &ckpt.vocab, set, mode, templates.as_ref())?;
            write_report(&mut run, &format!("report_{stem}"), &report)?;
            write_samples(&mut run, &format!("samples_{stem}.tsv"), &report)?;
            overview.insert(stem, json!({"n": report.n, "em": report.em, "f1": report.f1}));
        }
        write_json(&mut run, "reports.json", &json!(overview))?;
    }
    run.finish()
}
