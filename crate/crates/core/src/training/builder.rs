use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{apply_update, lr_at, reduce_grads, EpochRecord, FinetuneConfig, LossCurve, LrSchedule, TrainError};
use crate::corpus::{normalize_text, Episode};
use crate::gridworld::{feasible_vec, Action, ActionSeq, Grid};
use crate::model::{Model, Net};
use crate::numcore::{AdamState, Graph, ParamGrads, Var};
use crate::par::{derive_seed, Execution};
use crate::tokenizer::{encode_tail, Encoding, Vocabulary};

const ORDER_STREAM: u64 = 11;
const DROPOUT_STREAM: u64 = 12;

/// One builder turn under gold history: the dialogue so far, the grid before
/// the turn and the gold actions.
#[derive(Debug, Clone, PartialEq)]
pub struct BuilderExample {
    pub episode: String,
    pub turn: usize,
    pub encoding: Encoding,
    pub grid: Grid,
    pub gold: ActionSeq,
}

/// Every gold turn of `episodes`, replaying gold history to get each turn's
/// starting grid. Context keeps the most recent `max_len − 2` tokens.
pub fn builder_examples(
    episodes: &[Episode],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<BuilderExample>, TrainError> {
    let mut out = Vec::new();
    for e in episodes {
        let mut grid = e.initial_world.clone();
        for gt in &e.gold_turns {
            let before = grid.clone();
            for (step, a) in gt.actions.iter().enumerate() {
                if !grid.is_feasible(a) {
                    return Err(TrainError::GoldNotFeasible {
                        episode: e.id.clone(),
                        turn: gt.turn,
                        step,
                        action: *a,
                    });
                }
                grid.apply_mut(a).map_err(|source| TrainError::Episode {
                    episode: e.id.clone(),
                    source,
                })?;
            }
            out.push(BuilderExample {
                episode: e.id.clone(),
                turn: gt.turn,
                encoding: encode_tail(vocab, &normalize_text(&e.context_text(gt.turn)), max_len),
                grid: before,
                gold: gt.actions.clone(),
            });
        }
    }
    Ok(out)
}

/// Teacher-forced loss of one turn: cross-entropy of each gold action against
/// the feasible set of the grid it was taken from, then a final Stop target.
/// Returns the summed loss node and the number of scored steps.
fn turn_loss<'m>(
    net: &Net<'m, f32>,
    g: &mut Graph<'m, f32>,
    ex: &BuilderExample,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, usize), TrainError> {
    let text = net.encode_prefix(g, &ex.encoding, rng)?;
    let mut grid = ex.grid.clone();
    let mut total: Option<Var> = None;
    for step in 0..=ex.gold.len() {
        let candidates = feasible_vec(&grid);
        let target = match ex.gold.get(step) {
            Some(a) => candidates
                .iter()
                .position(|c| c == a)
                .ok_or_else(|| TrainError::GoldNotFeasible {
                    episode: ex.episode.clone(),
                    turn: ex.turn,
                    step,
                    action: *a,
                })?,
            None => 0,
        };
        debug_assert_eq!(candidates[0], Action::Stop);
        let world = net.encode_world(g, &grid)?;
        let scores = net.builder_step_logits(g, text, world, &candidates)?;
        let ce = g.cross_entropy(scores, &[target as i64])?;
        total = Some(match total {
            None => ce,
            Some(t) => g.add(t, ce)?,
        });
        if let Some(a) = ex.gold.get(step) {
            grid.apply_mut(a).map_err(|source| TrainError::Episode {
                episode: ex.episode.clone(),
                source,
            })?;
        }
    }
    Ok((total.expect("Stop step always scored"), ex.gold.len() + 1))
}

fn example_grads(
    model: &Model,
    ex: &BuilderExample,
    train: Option<u64>,
) -> Result<(f64, usize, Option<ParamGrads<f32>>), TrainError> {
    let net = model.net()?;
    let mut g = Graph::new();
    let mut rng = train.map(ChaCha8Rng::seed_from_u64);
    let (loss, steps) = turn_loss(&net, &mut g, ex, rng.as_mut())?;
    let value = g.scalar(loss) as f64;
    let grads = match train {
        Some(_) => Some(g.backward(loss)?.param_grads(model.params().len())),
        None => None,
    };
    Ok((value, steps, grads))
}

/// Mean per-step cross-entropy over `examples`, or `None` when empty.
pub fn evaluate_builder_loss(
    model: &Model,
    examples: &[BuilderExample],
    exec: Execution,
) -> Result<Option<f64>, TrainError> {
    let parts = exec.try_map(examples.len(), |i| example_grads(model, &examples[i], None))?;
    let (sum, steps) = parts.iter().fold((0.0, 0), |(s, n), p| (s + p.0, n + p.1));
    Ok((steps > 0).then(|| sum / steps as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuilderRun {
    pub model: Model,
    pub curve: LossCurve,
    pub lr_log: Vec<(usize, f64)>,
    /// Mean per-step loss of every optimizer step's batch, before its update.
    pub step_losses: Vec<f64>,
}

/// Teacher-forced fine-tuning with Adam and the warmup/decay schedule. Batch
/// loss is the mean over all scored steps in the batch.
pub fn train_builder(
    train: &[BuilderExample],
    valid: &[BuilderExample],
    init: Model,
    cfg: &FinetuneConfig,
) -> Result<BuilderRun, TrainError> {
    cfg.validate()?;
    let opt = &cfg.optim;
    let mut run = BuilderRun {
        model: init,
        curve: LossCurve::default(),
        lr_log: Vec::new(),
        step_losses: Vec::new(),
    };
    let steps_per_epoch = train.len().div_ceil(opt.batch_size);
    let total = opt.total_steps(steps_per_epoch);
    if total == 0 {
        return Ok(run);
    }
    if train.is_empty() {
        return Err(TrainError::NoExamples);
    }
    let schedule = LrSchedule::from_fraction(total, opt.warmup_fraction, opt.peak_lr)?;
    let mut adam = AdamState::new(run.model.params(), opt.adam);
    let n_params = run.model.params().len();
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(opt.seed, &[ORDER_STREAM, epoch as u64])));
        let (mut loss_sum, mut loss_steps) = (0.0f64, 0usize);
        for batch in order.chunks(opt.batch_size) {
            if step >= total {
                break;
            }
            let model = &run.model;
            let parts = opt.execution.try_map(batch.len(), |j| {
                let i = batch[j];
                let dseed = derive_seed(opt.seed, &[DROPOUT_STREAM, epoch as u64, i as u64]);
                example_grads(model, &train[i], Some(dseed))
            })?;
            let steps: usize = parts.iter().map(|p| p.1).sum();
            let batch_sum: f64 = parts.iter().map(|p| p.0).sum();
            let grads: Vec<ParamGrads<f32>> = parts.into_iter().filter_map(|p| p.2).collect();
            let mut grads = reduce_grads(n_params, &grads);
            grads.scale(1.0 / steps as f32);
            if !batch_sum.is_finite() || !grads.all_finite() {
                return Err(TrainError::NonFiniteLoss {
                    what: "builder loss",
                    epoch: epoch + 1,
                    step,
                });
            }
            loss_sum += batch_sum;
            loss_steps += steps;
            run.step_losses.push(batch_sum / steps as f64);
            let lr = lr_at(&schedule, step)?;
            run.lr_log.push((step, lr));
            apply_update(&mut run.model, &mut adam, grads, lr, opt.grad_clip)?;
            step += 1;
        }
        let valid_loss = evaluate_builder_loss(&run.model, valid, opt.execution)?;
        let train_loss = loss_sum / loss_steps.max(1) as f64;
        log::info!(
            "builder epoch {} train {train_loss:.5} valid {}",
            epoch + 1,
            valid_loss.map_or("-".into(), |v| format!("{v:.5}"))
        );
        run.curve.records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            valid_loss,
            seconds: if opt.wall_clock { started.elapsed().as_secs_f64() } else { 0.0 },
        });
        epoch += 1;
    }
    Ok(run)
}

/// Greedy decoding: score the feasible set, take the highest-scoring
/// candidate (earliest in canonical order on ties), apply it and repeat until
/// Stop wins or `max_steps` actions have been taken. The returned sequence
/// excludes Stop and always replays from `grid`.
pub fn decode_actions(
    model: &Model,
    encoding: &Encoding,
    grid: &Grid,
    max_steps: usize,
) -> Result<ActionSeq, TrainError> {
    let net = model.net()?;
    let mut g = Graph::new();
    let text = net.encode_prefix(&mut g, encoding, None)?;
    let mut grid = grid.clone();
    let mut out = Vec::new();
    while out.len() < max_steps {
        let candidates = feasible_vec(&grid);
        let world = net.encode_world(&mut g, &grid)?;
        let scores = net.builder_step_logits(&mut g, text, world, &candidates)?;
        let best = g
            .value(scores)
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0;
        let action = candidates[best];
        if action == Action::Stop {
            break;
        }
        grid.apply_mut(&action).expect("feasible candidates always apply");
        out.push(action);
    }
    Ok(out)
}
