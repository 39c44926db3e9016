use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{apply_update, lr_at, reduce_grads, EpochRecord, LossCurve, LrSchedule, PretrainConfig, TrainError};
use crate::model::{init_model, Model, ModelConfig};
use crate::numcore::{AdamState, Graph, ParamGrads};
use crate::par::{derive_seed, Execution};
use crate::tokenizer::{encode, mask_tokens, Encoding, MaskingConfig, MaskingOutput, Vocabulary};

const SPLIT_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;
const MASK_STREAM: u64 = 3;
const DROPOUT_STREAM: u64 = 4;
const FIXED_MASK_STREAM: u64 = 5;

/// State of a pretraining run at an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmRun {
    pub model: Model,
    pub adam: AdamState<f32>,
    pub epochs_done: usize,
    pub steps_done: usize,
    pub curve: LossCurve,
    pub lr_log: Vec<(usize, f64)>,
}

impl MlmRun {
    pub fn start(model: Model, cfg: &PretrainConfig) -> Self {
        let adam = AdamState::new(model.params(), cfg.optim.adam);
        MlmRun {
            model,
            adam,
            epochs_done: 0,
            steps_done: 0,
            curve: LossCurve::default(),
            lr_log: Vec::new(),
        }
    }
}

/// Seeded shuffle, then the first `round(valid_fraction × n)` texts (at most
/// `n − 1`) become validation and the rest training.
pub fn split_texts(texts: &[String], valid_fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let n = texts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SPLIT_STREAM])));
    let n_valid = ((valid_fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let pick = |idx: &[usize]| idx.iter().map(|&i| texts[i].clone()).collect::<Vec<_>>();
    (pick(&order[n_valid..]), pick(&order[..n_valid]))
}

/// Fresh model from `model_config` (its `vocab_size` must match `vocab`),
/// trained for the full configured length.
pub fn pretrain_mlm(
    texts: &[String],
    vocab: &Vocabulary,
    model_config: &ModelConfig,
    cfg: &PretrainConfig,
) -> Result<MlmRun, TrainError> {
    if model_config.vocab_size != vocab.len() {
        return Err(TrainError::InvalidConfig(format!(
            "model vocab_size {} but vocabulary has {} tokens",
            model_config.vocab_size,
            vocab.len()
        )));
    }
    cfg.validate()?;
    let model = init_model(model_config)?;
    pretrain_mlm_resume(texts, vocab, cfg, MlmRun::start(model, cfg), None)
}

/// Per-example masked-LM loss sum and masked-token count. `train` carries the
/// dropout seed; when present the gradient of the sum is returned too.
fn example_grads(
    model: &Model,
    enc: &Encoding,
    masked: &MaskingOutput,
    train: Option<u64>,
) -> Result<(f64, usize, Option<ParamGrads<f32>>), TrainError> {
    let count = masked.selected_count();
    if count == 0 {
        return Ok((0.0, 0, None));
    }
    let net = model.net()?;
    let n = enc.real_len();
    let input = Encoding {
        ids: masked.masked_ids.clone(),
        attention_mask: enc.attention_mask.clone(),
    };
    let mut rng = train.map(ChaCha8Rng::seed_from_u64);
    let mut g = Graph::new();
    let h = net.encode_prefix(&mut g, &input, rng.as_mut())?;
    let logits = net.mlm_logits(&mut g, h)?;
    let ce = g.cross_entropy(logits, &masked.labels[..n])?;
    let loss = g.scale(ce, count as f32);
    let value = g.scalar(loss) as f64;
    let grads = match train {
        Some(_) => Some(g.backward(loss)?.param_grads(model.params().len())),
        None => None,
    };
    Ok((value, count, grads))
}

fn masked_loss(
    model: &Model,
    encs: &[Encoding],
    masks: &[MaskingOutput],
    exec: Execution,
) -> Result<Option<f64>, TrainError> {
    let parts = exec.try_map(encs.len(), |i| example_grads(model, &encs[i], &masks[i], None))?;
    let (sum, count) = parts.iter().fold((0.0, 0), |(s, c), p| (s + p.0, c + p.1));
    Ok((count > 0).then(|| sum / count as f64))
}

/// One seeded mask per text, independent of epoch.
fn fixed_masks(encs: &[Encoding], masking: &MaskingConfig, seed: u64, vocab: &Vocabulary) -> Vec<MaskingOutput> {
    encs.iter()
        .enumerate()
        .map(|(i, e)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[FIXED_MASK_STREAM, i as u64]));
            mask_tokens(e, masking, &mut rng, vocab)
        })
        .collect()
}

/// Mean masked-token cross-entropy of `model` on `texts` under one fixed,
/// seeded mask per text and no dropout; `None` when nothing gets masked.
/// Validation losses in the curve are computed this way.
pub fn mlm_loss(
    model: &Model,
    texts: &[String],
    vocab: &Vocabulary,
    mask_prob: f64,
    seed: u64,
    exec: Execution,
) -> Result<Option<f64>, TrainError> {
    let max_len = model.config().max_seq_len;
    let encs: Vec<Encoding> = texts.iter().map(|t| encode(vocab, t, max_len)).collect();
    let masks = fixed_masks(&encs, &MaskingConfig::with_prob(mask_prob), seed, vocab);
    masked_loss(model, &encs, &masks, exec)
}

/// Continues `run` until `cfg` is exhausted or `stop_after_epochs` total
/// epochs are done. Every random draw is keyed by (seed, epoch, example), so
/// stopping at an epoch boundary and resuming gives the same bits as an
/// uninterrupted run.
pub fn pretrain_mlm_resume(
    texts: &[String],
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
    mut run: MlmRun,
    stop_after_epochs: Option<usize>,
) -> Result<MlmRun, TrainError> {
    cfg.validate()?;
    if texts.iter().all(|t| t.split_whitespace().next().is_none()) {
        return Err(TrainError::EmptyCorpus);
    }
    let opt = &cfg.optim;
    let max_len = run.model.config().max_seq_len;
    let (train, valid) = split_texts(texts, cfg.valid_fraction, opt.seed);
    let train_enc: Vec<Encoding> = train.iter().map(|t| encode(vocab, t, max_len)).collect();
    let valid_enc: Vec<Encoding> = valid.iter().map(|t| encode(vocab, t, max_len)).collect();
    let masking = MaskingConfig::with_prob(cfg.mask_prob);
    let valid_masks = fixed_masks(&valid_enc, &masking, opt.seed, vocab);

    let steps_per_epoch = train_enc.len().div_ceil(opt.batch_size);
    let total = opt.total_steps(steps_per_epoch);
    let schedule = LrSchedule::from_fraction(total, opt.warmup_fraction, opt.peak_lr)?;
    let n_params = run.model.params().len();

    while run.steps_done < total && stop_after_epochs.is_none_or(|s| run.epochs_done < s) {
        let epoch = run.epochs_done;
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_enc.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(opt.seed, &[ORDER_STREAM, epoch as u64])));
        let (mut loss_sum, mut loss_count) = (0.0f64, 0usize);
        for batch in order.chunks(opt.batch_size) {
            if run.steps_done >= total {
                break;
            }
            let step = run.steps_done;
            let model = &run.model;
            let parts = opt.execution.try_map(batch.len(), |j| {
                let i = batch[j];
                let key = [epoch as u64, i as u64];
                let mut mrng = ChaCha8Rng::seed_from_u64(derive_seed(opt.seed, &[MASK_STREAM, key[0], key[1]]));
                let masked = mask_tokens(&train_enc[i], &masking, &mut mrng, vocab);
                let dseed = derive_seed(opt.seed, &[DROPOUT_STREAM, key[0], key[1]]);
                example_grads(model, &train_enc[i], &masked, Some(dseed))
            })?;
            let count: usize = parts.iter().map(|p| p.1).sum();
            let batch_sum: f64 = parts.iter().map(|p| p.0).sum();
            let grads: Vec<ParamGrads<f32>> = parts.into_iter().filter_map(|p| p.2).collect();
            let mut grads = reduce_grads(n_params, &grads);
            if count > 0 {
                grads.scale(1.0 / count as f32);
            }
            if !batch_sum.is_finite() || !grads.all_finite() {
                return Err(TrainError::NonFiniteLoss {
                    what: "masked-LM loss",
                    epoch: epoch + 1,
                    step,
                });
            }
            loss_sum += batch_sum;
            loss_count += count;
            let lr = lr_at(&schedule, step)?;
            run.lr_log.push((step, lr));
            apply_update(&mut run.model, &mut run.adam, grads, lr, opt.grad_clip)?;
            run.steps_done += 1;
        }
        let valid_loss = masked_loss(&run.model, &valid_enc, &valid_masks, opt.execution)?;
        let train_loss = if loss_count > 0 { loss_sum / loss_count as f64 } else { 0.0 };
        log::info!(
            "mlm epoch {} train {train_loss:.5} valid {}",
            epoch + 1,
            valid_loss.map_or("-".into(), |v| format!("{v:.5}"))
        );
        run.curve.records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            valid_loss,
            seconds: if opt.wall_clock { started.elapsed().as_secs_f64() } else { 0.0 },
        });
        run.epochs_done += 1;
    }
    Ok(run)
}
