use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::ArgMatches;

use blocklm::corpus::synthetic::{generate, single_action_episodes, SynthConfig};
use blocklm::corpus::{
    convert_state_log, extract_mlm_texts, load_corpus, normalize_text, write_corpus, Episode, LoadOptions, Split,
    StateLog,
};
use blocklm::eval::{evaluate_model, metrics_csv, report_table};
use blocklm::gridworld::{diff, render, GridDims};
use blocklm::model::{init_builder_from_mlm, init_model, load_checkpoint, save_checkpoint, Component, Model};
use blocklm::par::execution_for;
use blocklm::tokenizer::{build_vocab as make_vocab, Vocabulary};
use blocklm::training::{
    builder_examples, load_train_state, lr_csv, pretrain_mlm_resume, save_train_state, train_builder, LossCurve,
    MlmRun,
};

use crate::config::{all_keys, RunConfig};
use crate::CliError;

pub struct Context<'a> {
    pub threads: usize,
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
}

fn path(m: &ArgMatches, name: &str) -> Option<PathBuf> {
    m.get_one::<String>(name).map(PathBuf::from)
}

fn required(m: &ArgMatches, name: &str) -> PathBuf {
    path(m, name).expect("clap enforces required arguments")
}

fn io_error(p: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", p.display()))
}

fn read_text(p: &Path) -> Result<String, CliError> {
    fs::read_to_string(p).map_err(|e| io_error(p, e))
}

fn write_file(p: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(p, contents).map_err(|e| io_error(p, e))
}

fn sibling(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// `dir/name.csv` → `dir/name.lr.csv`.
fn lr_path(curves: &Path) -> PathBuf {
    let stem = curves.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    curves.with_file_name(format!("{stem}.lr.csv"))
}

fn parse_grid(s: &str) -> Result<GridDims, CliError> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--grid expects WxHxD, got `{s}`")))?;
    match parts[..] {
        [w, h, d] if w > 0 && h > 0 && d > 0 => Ok(GridDims::new(w, h, d)),
        _ => Err(CliError::Usage(format!("--grid expects WxHxD, got `{s}`"))),
    }
}

/// Defaults, then the config file, then flags.
fn run_config(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = path(m, "config") {
        cfg.apply_text(&read_text(&p)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    }
    for key in all_keys() {
        if let Some(v) = m.get_one::<String>(&key) {
            cfg.set(&key, v).map_err(|e| CliError::Usage(format!("--{key}: {e}")))?;
        }
    }
    Ok(cfg)
}

/// Writes the effective config to `err` and next to `output`.
fn record_config(cfg: &RunConfig, output: &Path, err: &mut dyn Write) -> Result<(), CliError> {
    let text = cfg.to_text();
    let _ = write!(err, "effective config:\n{text}");
    write_file(&sibling(output, ".config"), text)
}

fn load_options(m: &ArgMatches, dims: GridDims) -> LoadOptions {
    LoadOptions {
        dims,
        lenient: m.get_flag("lenient"),
    }
}

fn split_of(m: &ArgMatches) -> Option<Split> {
    match m.get_one::<String>("split").map(String::as_str) {
        None | Some("all") => None,
        Some(s) => Some(s.parse().expect("clap restricts the values")),
    }
}

/// Utterances of the corpus, or the lines of a `.txt` file.
fn mlm_texts(m: &ArgMatches, dims: GridDims) -> Result<Vec<String>, CliError> {
    let p = required(m, "corpus");
    if p.extension().is_some_and(|e| e == "txt") {
        return Ok(read_text(&p)?
            .lines()
            .map(normalize_text)
            .filter(|l| !l.is_empty())
            .collect());
    }
    Ok(extract_mlm_texts(&load_corpus(&p, split_of(m), &load_options(m, dims))?))
}

fn read_vocab(p: &Path) -> Result<Vocabulary, CliError> {
    Vocabulary::from_file_string(&read_text(p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

/// Takes the vocabulary size from `vocab` unless it was set explicitly, in
/// which case the two must agree.
fn fit_vocab_size(cfg: &mut RunConfig, vocab: &Vocabulary) -> Result<(), CliError> {
    if cfg.is_explicit("model.vocab_size") && cfg.model.vocab_size != vocab.len() {
        return Err(CliError::Data(format!(
            "model.vocab_size = {} but the vocabulary has {} tokens",
            cfg.model.vocab_size,
            vocab.len()
        )));
    }
    cfg.model.vocab_size = vocab.len();
    Ok(())
}

fn write_curves(curve: &LossCurve, lr: &[(usize, f64)], p: &Path) -> Result<(), CliError> {
    write_file(p, curve.to_csv())?;
    write_file(&lr_path(p), lr_csv(lr))
}

pub fn build_vocab(m: &ArgMatches, ctx: Context) -> Result<(), CliError> {
    let texts = mlm_texts(m, GridDims::default())?;
    let vocab = make_vocab(
        &texts,
        *m.get_one::<usize>("min-freq").expect("default"),
        *m.get_one::<usize>("max-size").expect("default"),
    )?;
    let out = required(m, "out");
    write_file(&out, vocab.to_file_string())?;
    let _ = writeln!(ctx.out, "wrote {} tokens from {} utterances to {}", vocab.len(), texts.len(), out.display());
    Ok(())
}

pub fn pretrain(m: &ArgMatches, ctx: Context) -> Result<(), CliError> {
    let mut cfg = run_config(m)?;
    let vocab = read_vocab(&required(m, "vocab"))?;
    fit_vocab_size(&mut cfg, &vocab)?;
    cfg.pretrain.optim.execution = execution_for(ctx.threads);
    cfg.pretrain.validate()?;
    let texts = mlm_texts(m, cfg.model.grid)?;
    let out = required(m, "out-checkpoint");
    record_config(&cfg, &out, ctx.err)?;

    let mut run = match path(m, "resume") {
        Some(p) => {
            let run = load_train_state(&p, &cfg.pretrain)?;
            if run.model.config() != &cfg.model {
                return Err(CliError::Data(format!(
                    "{}: saved model config differs from the effective one",
                    p.display()
                )));
            }
            run
        }
        None => MlmRun::start(init_model(&cfg.model)?, &cfg.pretrain),
    };
    let state = path(m, "state");
    loop {
        let before = run.epochs_done;
        run = pretrain_mlm_resume(&texts, &vocab, &cfg.pretrain, run, Some(before + 1))?;
        if run.epochs_done == before {
            break;
        }
        if let Some(p) = &state {
            save_train_state(&run, p)?;
        }
    }

    save_checkpoint(&run.model, Some(&vocab), &out)?;
    let curves = required(m, "curves");
    write_curves(&run.curve, &run.lr_log, &curves)?;
    if let (Some(first), Some(last)) = (run.curve.first(), run.curve.last()) {
        let _ = writeln!(
            ctx.out,
            "pretrained {} epochs ({} steps): train loss {:.4} -> {:.4}",
            run.epochs_done, run.steps_done, first.train_loss, last.train_loss
        );
    }
    Ok(())
}

fn split_episodes(all: Vec<Episode>, split: Split) -> Vec<Episode> {
    all.into_iter().filter(|e| e.split == split).collect()
}

pub fn finetune(m: &ArgMatches, ctx: Context) -> Result<(), CliError> {
    let mut cfg = run_config(m)?;
    let backbone = path(m, "init-checkpoint").map(|p| load_checkpoint(&p)).transpose()?;
    let vocab = match (path(m, "vocab"), &backbone) {
        (Some(p), _) => read_vocab(&p)?,
        (None, Some(ck)) => ck
            .vocab
            .clone()
            .ok_or_else(|| CliError::Data("init checkpoint carries no vocabulary; pass --vocab".into()))?,
        (None, None) => return Err(CliError::Usage("--vocab is required without --init-checkpoint".into())),
    };
    if let Some(ck) = &backbone {
        cfg.inherit_model(ck.model.config());
    }
    fit_vocab_size(&mut cfg, &vocab)?;
    cfg.finetune.optim.execution = execution_for(ctx.threads);
    cfg.finetune.validate()?;
    cfg.model.validate()?;

    let all = load_corpus(required(m, "corpus"), None, &load_options(m, cfg.model.grid))?;
    let max_len = cfg.model.max_seq_len;
    let train = builder_examples(&split_episodes(all.clone(), Split::Train), &vocab, max_len)?;
    let valid = builder_examples(&split_episodes(all, Split::Valid), &vocab, max_len)?;
    let init = match &backbone {
        Some(ck) => init_builder_from_mlm(&ck.model, &cfg.model)?,
        None => init_model(&cfg.model)?.without(Component::MlmHead),
    };
    let out = required(m, "out-checkpoint");
    record_config(&cfg, &out, ctx.err)?;

    let run = train_builder(&train, &valid, init, &cfg.finetune)?;
    save_checkpoint(&run.model, Some(&vocab), &out)?;
    if let Some(p) = path(m, "curves") {
        write_curves(&run.curve, &run.lr_log, &p)?;
    }
    let last = run.curve.last();
    let _ = writeln!(
        ctx.out,
        "fine-tuned on {} turns for {} steps: train loss {}, valid loss {}",
        train.len(),
        run.step_losses.len(),
        last.map_or("-".into(), |r| format!("{:.4}", r.train_loss)),
        last.and_then(|r| r.valid_loss).map_or("-".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

pub fn evaluate(m: &ArgMatches, ctx: Context) -> Result<(), CliError> {
    let mut cfg = run_config(m)?;
    let ck_path = required(m, "checkpoint");
    let ck = load_checkpoint(&ck_path)?;
    let model: &Model = &ck.model;
    for (k, v) in cfg.model.to_text().lines().filter_map(|l| l.split_once(" = ")) {
        if cfg.is_explicit(&format!("model.{k}")) && model.config().get(k).as_deref() != Some(v) {
            return Err(CliError::Data(format!("checkpoint was trained with a different model.{k}")));
        }
    }
    cfg.inherit_model(model.config());
    cfg.finetune.validate()?;
    if !model.has(Component::BuilderHead) {
        return Err(CliError::Data(format!("{}: checkpoint has no builder head", ck_path.display())));
    }
    let vocab = match path(m, "vocab") {
        Some(p) => read_vocab(&p)?,
        None => ck
            .vocab
            .clone()
            .ok_or_else(|| CliError::Data("checkpoint carries no vocabulary; pass --vocab".into()))?,
    };
    let episodes = load_corpus(required(m, "corpus"), split_of(m), &load_options(m, cfg.model.grid))?;
    let report = required(m, "report");
    record_config(&cfg, &report, ctx.err)?;

    let metrics = evaluate_model(
        model,
        &vocab,
        &episodes,
        cfg.finetune.max_decode_steps,
        execution_for(ctx.threads),
    )?;
    let name = m.get_one::<String>("name").cloned().unwrap_or_else(|| {
        ck_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    let rows = vec![(name, metrics)];
    write_file(&report, metrics_csv(&rows))?;
    let _ = write!(ctx.out, "{}", report_table(&rows));
    Ok(())
}

pub fn replay(m: &ArgMatches, ctx: Context) -> Result<(), CliError> {
    let dims = parse_grid(m.get_one::<String>("grid").expect("default"))?;
    let episodes = load_corpus(required(m, "corpus"), None, &load_options(m, dims))?;
    let id = m.get_one::<String>("episode").expect("required");
    let e = episodes
        .iter()
        .find(|e| &e.id == id)
        .ok_or_else(|| CliError::Data(format!("no episode `{id}` in the corpus")))?;
    let grids = e
        .gold_grids()
        .map_err(|err| CliError::Data(format!("episode {id}: {err}")))?;
    let out = ctx.out;
    let _ = writeln!(out, "episode {} ({}), grid {}", e.id, e.split, dims);
    let _ = write!(out, "initial world:\n{}", render(&grids[0]));
    for (k, gt) in e.gold_turns.iter().enumerate() {
        let said = e.dialogue.get(gt.turn).map_or("", |u| u.text.as_str());
        let _ = writeln!(out, "\nturn {}: {said}", gt.turn);
        let actions: Vec<String> = gt.actions.iter().map(|a| a.to_string()).collect();
        let _ = writeln!(out, "actions: {}", actions.join("; "));
        let change = diff(&grids[k], &grids[k + 1]).map_err(|err| CliError::Data(err.to_string()))?;
        let _ = writeln!(out, "net change:");
        for d in &change {
            let _ = writeln!(out, "  {d}");
        }
        let _ = write!(out, "world:\n{}", render(&grids[k + 1]));
    }
    Ok(())
}

pub fn synth(m: &ArgMatches, ctx: Context) -> Result<(), CliError> {
    let dims = parse_grid(m.get_one::<String>("grid").expect("default"))?;
    let n = *m.get_one::<usize>("episodes").expect("default");
    let seed = *m.get_one::<u64>("seed").expect("default");
    let episodes = if m.get_flag("single-action") {
        single_action_episodes(n, dims, seed)
    } else {
        generate(&SynthConfig {
            episodes: n,
            dims,
            seed,
            ..SynthConfig::default()
        })
    };
    let out = required(m, "out");
    let mut buf = Vec::new();
    write_corpus(&mut buf, &episodes).map_err(|e| io_error(&out, e))?;
    write_file(&out, buf)?;
    let _ = writeln!(ctx.out, "wrote {} episodes to {}", episodes.len(), out.display());
    Ok(())
}

pub fn convert_logs(m: &ArgMatches, ctx: Context) -> Result<(), CliError> {
    let dims = parse_grid(m.get_one::<String>("grid").expect("default"))?;
    let split: Split = m.get_one::<String>("split").expect("default").parse().map_err(CliError::Usage)?;
    let offset_text = m.get_one::<String>("offset").expect("default");
    let offset: Vec<i32> = offset_text
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--offset expects X,Y,Z, got `{offset_text}`")))?;
    let [ox, oy, oz] = offset[..] else {
        return Err(CliError::Usage(format!("--offset expects X,Y,Z, got `{offset_text}`")));
    };
    let input = required(m, "input");
    let mut episodes = Vec::new();
    for (i, line) in read_text(&input)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let log: StateLog = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("{} line {}: {e}", input.display(), i + 1)))?;
        let e = convert_state_log(&log, split, dims, (ox, oy, oz))
            .map_err(|e| CliError::Data(format!("{} line {}: {e}", input.display(), i + 1)))?;
        episodes.push(e);
    }
    let out = required(m, "out");
    let mut buf = Vec::new();
    write_corpus(&mut buf, &episodes).map_err(|e| io_error(&out, e))?;
    write_file(&out, buf)?;
    let _ = writeln!(ctx.out, "converted {} logs to {}", episodes.len(), out.display());
    Ok(())
}
