//! Subcommand implementations. Each returns the text it would print so the
//! binary and the tests share one code path.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gapcoref::checkpoint::{read_checkpoint, write_checkpoint};
use gapcoref::data::{dataset_stats, parse_gap_tsv, pronoun_gender, stratified_folds, FoldPlan, GapRecord, Gender};
use gapcoref::encoder::{read_embeddings, EmbeddingStore, StateSource};
use gapcoref::metrics::{
    ensemble_average, exact_answer_match, gender_metrics, golds_from_records, read_predictions_csv,
    write_predictions_csv, F1Averaging, Predictions,
};
use gapcoref::qa::{answer_question, question_for};
use gapcoref::seed;
use gapcoref::synthetic::build_vocab;
use gapcoref::tokenizer::Vocab;
use gapcoref::train::{
    average_folds, epoch_mean_losses, step_log_csv, train, Backbone, Head, PipelineSettings, TrainedModel,
};

use crate::config::RunConfig;
use crate::error::{io_err, CliError};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(io_err(path))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// GAP records from a TSV file; a file with no content at all yields none.
pub fn read_records(path: &Path) -> Result<Vec<GapRecord>, CliError> {
    let bytes = read_bytes(path)?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(Vec::new());
    }
    Ok(parse_gap_tsv(&bytes)?)
}

pub fn read_vocab(path: &Path) -> Result<Vocab, CliError> {
    Ok(Vocab::load(&read_bytes(path)?)?)
}

pub fn read_store(path: &Path) -> Result<EmbeddingStore, CliError> {
    Ok(read_embeddings(&read_bytes(path)?)?)
}

pub fn read_predictions(path: &Path) -> Result<Predictions, CliError> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::Usage(format!("{}: not UTF-8", path.display())))?;
    Ok(read_predictions_csv(&text)?)
}

pub fn cmd_stats(data: &Path) -> Result<String, CliError> {
    let records = read_records(data)?;
    let s = dataset_stats(&records)?;
    let mut male = 0;
    for r in &records {
        if pronoun_gender(r)? == Gender::Male {
            male += 1;
        }
    }
    Ok(format!(
        "total={}\nA={}\nB={}\nN={}\nmale={}\nfemale={}\n",
        s.total,
        s.a_count,
        s.b_count,
        s.n_count,
        male,
        records.len() - male
    ))
}

/// `ID<TAB>fold` lines under a header.
pub fn cmd_folds(data: &Path, k: usize, seed_value: u64) -> Result<String, CliError> {
    let records = read_records(data)?;
    let plan = if k == 1 { FoldPlan::single(&records) } else { stratified_folds(&records, k, seed_value)? };
    let mut out = String::from("ID\tfold\n");
    for r in &records {
        let _ = writeln!(out, "{}\t{}", r.id, plan.fold_of(&r.id).unwrap_or(0));
    }
    Ok(out)
}

fn fold_plan(records: &[GapRecord], k: usize, seed_value: u64) -> Result<FoldPlan, CliError> {
    Ok(if k == 1 { FoldPlan::single(records) } else { stratified_folds(records, k, seed_value)? })
}

/// Train one model per fold and write checkpoints, step logs and prediction
/// files into `out_dir`. Returns the report printed at the end.
pub fn cmd_train(config: &RunConfig) -> Result<String, CliError> {
    let data = config.data.as_ref().ok_or_else(|| CliError::Usage("train needs data".into()))?;
    let records = read_records(data)?;
    let test = match &config.test {
        Some(p) => read_records(p)?,
        None => Vec::new(),
    };
    let dir = &config.out_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join("config.txt"), config.echo())?;

    let vocab = match &config.vocab {
        Some(p) => read_vocab(p)?,
        None => {
            let v = build_vocab(records.iter().chain(&test).map(|r| r.text.as_str()).chain(["is neither"]));
            write_file(&dir.join("vocab.txt"), v.to_text())?;
            v
        }
    };
    let store = config.embeddings.as_deref().map(read_store).transpose()?;
    let mut encoder = config.encoder.clone();
    encoder.vocab_size = vocab.len();
    encoder.seed = seed::derive(config.seed, "encoder");
    let backbone = match &store {
        Some(s) => Backbone::External(s),
        None => Backbone::Trainable(&encoder),
    };
    let mut trainer = config.trainer.clone();
    trainer.seed = config.seed;
    let plan = fold_plan(&records, config.folds, config.seed)?;
    let outcome = train(config.kind, backbone, &vocab, &records, &plan, &test, &trainer)?;

    let mut report = String::new();
    for f in &outcome.folds {
        let stem = format!("fold{}", f.fold);
        write_file(&dir.join(format!("{stem}.ckpt")), write_checkpoint(&f.model))?;
        write_file(&dir.join(format!("{stem}.log.csv")), step_log_csv(&f.logs))?;
        let losses = epoch_mean_losses(&f.logs);
        let _ = writeln!(
            report,
            "fold {}: {} training examples, epoch mean loss {}",
            f.fold,
            f.train_examples,
            losses.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>().join(" ")
        );
    }
    if plan.k() > 1 {
        let oof = outcome.out_of_fold();
        write_file(&dir.join("oof.csv"), write_predictions_csv(&oof))?;
        if let Ok(m) = gender_metrics(&oof, &golds_from_records(&records)?, F1Averaging::Micro) {
            let _ = write!(report, "out-of-fold:\n{}", m.to_table(config.kind.name()));
        }
    }
    if config.test.is_some() {
        let avg = average_folds(&outcome.fold_predictions)?;
        write_file(&dir.join("test.csv"), write_predictions_csv(&avg))?;
    }
    let _ = writeln!(report, "wrote {}", dir.display());
    Ok(report)
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<TrainedModel>, CliError> {
    if paths.is_empty() {
        return Err(CliError::Usage("at least one checkpoint is required".into()));
    }
    let mut models = Vec::new();
    for p in paths {
        models.push(read_checkpoint(&read_bytes(p)?)?);
    }
    Ok(models)
}

/// Average the predictions of several fold checkpoints.
pub fn cmd_predict(
    checkpoints: &[PathBuf],
    data: &Path,
    vocab: &Path,
    embeddings: Option<&Path>,
    settings: &PipelineSettings,
) -> Result<String, CliError> {
    let models = load_models(checkpoints)?;
    let records = read_records(data)?;
    let vocab = read_vocab(vocab)?;
    let store = embeddings.map(read_store).transpose()?;
    let mut all = Vec::new();
    for m in &models {
        all.push(m.predict(store.as_ref(), &records, &vocab, settings)?);
    }
    Ok(write_predictions_csv(&ensemble_average(&all)?))
}

/// Candidate-blind answers: one `ID<TAB>char_start<TAB>char_end<TAB>text`
/// line per record. The second value is exact-answer accuracy over records
/// whose gold label is A or B.
pub fn cmd_extract_answers(
    checkpoints: &[PathBuf],
    data: &Path,
    vocab: &Path,
    embeddings: Option<&Path>,
    settings: &PipelineSettings,
) -> Result<(String, Option<f64>), CliError> {
    let models = load_models(checkpoints)?;
    let records = read_records(data)?;
    let vocab = read_vocab(vocab)?;
    let store = embeddings.map(read_store).transpose()?;
    let mut pairs: Vec<(&dyn StateSource, &gapcoref::qa::QaHead)> = Vec::new();
    for m in &models {
        let Head::Qa(head) = &m.head else {
            return Err(CliError::Usage(format!("extract-answers needs QA checkpoints, got {}", m.kind())));
        };
        let source: &dyn StateSource = match (&m.encoder, &store) {
            (Some(e), _) => e,
            (None, Some(s)) => s,
            (None, None) => return Err(CliError::Usage("checkpoint has no encoder; pass --embeddings".into())),
        };
        pairs.push((source, head));
    }
    let mut out = String::new();
    let (mut hits, mut scored) = (0usize, 0usize);
    for r in &records {
        let question = question_for(r, settings.window)?;
        let key = gapcoref::train::qa_key(&r.id);
        let answer =
            answer_question(&pairs, &key, &question, &r.text, &vocab, settings.max_seq_len, settings.max_answer_len)?;
        if let Some(a) = answer {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", r.id, a.char_start, a.char_end, a.text);
            if r.a_coref || r.b_coref {
                scored += 1;
                hits += usize::from(exact_answer_match(&a, r));
            }
        } else if r.a_coref || r.b_coref {
            scored += 1;
        }
    }
    let accuracy = (scored > 0).then(|| hits as f64 / scored as f64);
    Ok((out, accuracy))
}

pub fn cmd_ensemble(paths: &[PathBuf]) -> Result<String, CliError> {
    let mut systems = Vec::new();
    for p in paths {
        systems.push(read_predictions(p)?);
    }
    Ok(write_predictions_csv(&ensemble_average(&systems)?))
}

pub fn cmd_evaluate(pred: &Path, gold: &Path, macro_f1: bool) -> Result<String, CliError> {
    let preds = read_predictions(pred)?;
    let golds = golds_from_records(&read_records(gold)?)?;
    let averaging = if macro_f1 { F1Averaging::MacroOverGenders } else { F1Averaging::Micro };
    let report = gender_metrics(&preds, &golds, averaging)?;
    let name = pred.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    Ok(format!("{}\n{}", report.to_table(name), report.to_key_values()))
}
