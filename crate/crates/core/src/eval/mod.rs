//! Net-action precision, recall and F1, and the text/CSV reports built from
//! them.

use std::fmt::Write as _;

use thiserror::Error;

use crate::corpus::{normalize_text, Episode};
use crate::gridworld::{diff, replay, ActionSeq, Grid, GridError, NetChange};
use crate::model::Model;
use crate::par::Execution;
use crate::tokenizer::{encode_tail, Vocabulary};
use crate::training::{decode_actions, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("episode {episode} turn {turn}: {source}")]
    Decode {
        episode: String,
        turn: usize,
        #[source]
        source: TrainError,
    },
    #[error("episode {episode} turn {turn}: predicted actions do not replay: {source}")]
    Replay {
        episode: String,
        turn: usize,
        #[source]
        source: GridError,
    },
    #[error("episode {episode}: gold history does not replay: {source}")]
    Gold {
        episode: String,
        #[source]
        source: GridError,
    },
}

/// Counts plus the ratios derived from them. Zero denominators give 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Metrics {
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Metrics {
        let recall = ratio(tp, tp + fn_);
        let precision = ratio(tp, tp + fp);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            recall,
            precision,
            f1,
        }
    }

    /// Only for display and the table; ratios come from the counts.
    pub fn from_ratios(recall: f64, precision: f64, f1: f64) -> Metrics {
        Metrics {
            recall,
            precision,
            f1,
            ..Metrics::default()
        }
    }
}

/// Micro-average: sum the counts, then compute the ratios once.
pub fn micro_average<'a>(parts: impl IntoIterator<Item = &'a Metrics>) -> Metrics {
    let (tp, fp, fn_) = parts.into_iter().fold((0, 0, 0), |(a, b, c), m| {
        (a + m.true_positives, b + m.false_positives, c + m.false_negatives)
    });
    Metrics::from_counts(tp, fp, fn_)
}

/// A prediction matches a gold item when cell, color and direction all agree.
pub fn net_action_metrics(pred: &NetChange, gold: &NetChange) -> Metrics {
    let tp = pred.iter().filter(|d| gold.contains(d)).count() as u64;
    Metrics::from_counts(tp, pred.len() as u64 - tp, gold.len() as u64 - tp)
}

/// Produces a builder turn's actions from the episode context and the grid
/// the turn starts from.
pub trait Predictor: Sync {
    fn predict(&self, episode: &Episode, turn: usize, grid: &Grid) -> Result<ActionSeq, TrainError>;
}

/// Greedy decoding with a trained model.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocabulary,
    pub max_steps: usize,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, episode: &Episode, turn: usize, grid: &Grid) -> Result<ActionSeq, TrainError> {
        let max_len = self.model.config().max_seq_len;
        let enc = encode_tail(self.vocab, &normalize_text(&episode.context_text(turn)), max_len);
        decode_actions(self.model, &enc, grid, self.max_steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnResult {
    pub episode: String,
    pub turn: usize,
    pub predicted: ActionSeq,
    pub metrics: Metrics,
}

fn episode_turns(p: &dyn Predictor, e: &Episode) -> Result<Vec<TurnResult>, EvalError> {
    let grids = e.gold_grids().map_err(|source| EvalError::Gold {
        episode: e.id.clone(),
        source,
    })?;
    let mut out = Vec::with_capacity(e.gold_turns.len());
    for (k, gt) in e.gold_turns.iter().enumerate() {
        let (before, after_gold) = (&grids[k], &grids[k + 1]);
        let predicted = p.predict(e, gt.turn, before).map_err(|source| EvalError::Decode {
            episode: e.id.clone(),
            turn: gt.turn,
            source,
        })?;
        let replay_err = |source| EvalError::Replay {
            episode: e.id.clone(),
            turn: gt.turn,
            source,
        };
        let after_pred = replay(before, &predicted).map_err(replay_err)?;
        let pred_change = diff(before, &after_pred).map_err(replay_err)?;
        let gold_change = diff(before, after_gold).map_err(replay_err)?;
        out.push(TurnResult {
            episode: e.id.clone(),
            turn: gt.turn,
            predicted,
            metrics: net_action_metrics(&pred_change, &gold_change),
        });
    }
    Ok(out)
}

/// Per-turn results in episode order. Each turn starts from the grid produced
/// by the gold actions of all earlier turns.
pub fn evaluate_turns(
    predictor: &dyn Predictor,
    episodes: &[Episode],
    exec: Execution,
) -> Result<Vec<TurnResult>, EvalError> {
    let per_episode = exec.try_map(episodes.len(), |i| episode_turns(predictor, &episodes[i]))?;
    Ok(per_episode.into_iter().flatten().collect())
}

/// Micro-averaged metrics of greedy decoding over every gold turn.
pub fn evaluate_model(
    model: &Model,
    vocab: &Vocabulary,
    episodes: &[Episode],
    max_steps: usize,
    exec: Execution,
) -> Result<Metrics, EvalError> {
    let p = ModelPredictor { model, vocab, max_steps };
    let turns = evaluate_turns(&p, episodes, exec)?;
    Ok(micro_average(turns.iter().map(|t| &t.metrics)))
}

/// `ratio × 100` to one decimal, ties rounded up. The tolerance absorbs
/// binary representation error so that e.g. 0.2845 counts as a tie.
pub fn percent(ratio: f64) -> String {
    let tenths = (ratio * 1000.0 + 0.5 + 1e-9).floor();
    format!("{:.1}", tenths / 10.0)
}

/// One line per model: name, then recall, precision and F1 in percent.
pub fn report_table(rows: &[(String, Metrics)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Model".len());
    let mut s = format!("{:<width$}  Recall Precision F1\n", "Model");
    for (name, m) in rows {
        let _ = writeln!(
            s,
            "{name:<width$}  {} {} {}",
            percent(m.recall),
            percent(m.precision),
            percent(m.f1)
        );
    }
    s
}

/// `model,recall,precision,f1,tp,fp,fn` with full-precision ratios.
pub fn metrics_csv(rows: &[(String, Metrics)]) -> String {
    let mut s = String::from("model,recall,precision,f1,tp,fp,fn\n");
    for (name, m) in rows {
        let _ = writeln!(
            s,
            "{name},{},{},{},{},{},{}",
            m.recall, m.precision, m.f1, m.true_positives, m.false_positives, m.false_negatives
        );
    }
    s
}
