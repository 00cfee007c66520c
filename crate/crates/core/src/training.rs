//! Batching, the training loop with Adam + global-norm clipping + early
//! stopping, word-accuracy evaluation, and the repeated-experiment harness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crf::{self, CrfParameters};
use crate::lexicon::{build_vocabulary, DatasetSplit, PhoneVocabulary, SyllabifiedEntry};
use crate::network::{
    self, backward, forward, Mode, ModelConfig, ModelParameters, OutputHead,
};
use crate::tensor::{adam_step, clip_global_norm, AdamParams, AdamState, Rng, Tensor};
use crate::Real;

/// Words per parallel gradient task. Chunk boundaries are fixed, and chunk
/// sums are combined in chunk order, so results do not depend on how many
/// worker threads run.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{which} set is empty")]
    EmptyDataset { which: &'static str },
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Network(#[from] network::NetworkError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: Real,
    pub dev_word_accuracy: Real,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub epoch_history: Vec<EpochStats>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub final_params: ModelParameters,
    pub seed: u64,
}

/// What "unimproved" means for early stopping. The default watches dev
/// word accuracy; dev loss is available for experimentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EarlyStoppingMetric {
    #[default]
    DevAccuracy,
    DevLoss,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    pub early_stopping_metric: EarlyStoppingMetric,
}

/// Strict-improvement tracker: `observe` returns true when the new value
/// beats the best seen so far.
struct EarlyStopping {
    higher_is_better: bool,
    patience: usize,
    best: Option<Real>,
    epochs_since_best: usize,
}

impl EarlyStopping {
    fn new(higher_is_better: bool, patience: usize) -> Self {
        EarlyStopping {
            higher_is_better,
            patience,
            best: None,
            epochs_since_best: 0,
        }
    }

    fn observe(&mut self, value: Real) -> bool {
        let improved = match self.best {
            None => true,
            Some(best) => {
                if self.higher_is_better {
                    value > best
                } else {
                    value < best
                }
            }
        };
        if improved {
            self.best = Some(value);
            self.epochs_since_best = 0;
        } else {
            self.epochs_since_best += 1;
        }
        improved
    }

    fn should_stop(&self) -> bool {
        self.epochs_since_best >= self.patience
    }
}

/// Shuffles `0..count` with the given generator and chunks the result; the
/// last batch may be smaller.
pub fn make_batches(count: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1);
    let mut order: Vec<usize> = (0..count).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Vocabulary over the whole split, in train, dev, test order.
pub fn vocabulary_for_split(split: &DatasetSplit) -> PhoneVocabulary {
    build_vocabulary(split.train.iter().chain(&split.dev).chain(&split.test))
}

struct EncodedWord {
    indices: Vec<usize>,
    labels: Vec<u8>,
}

fn encode_words(entries: &[SyllabifiedEntry], vocab: &PhoneVocabulary) -> Vec<EncodedWord> {
    entries
        .iter()
        .map(|e| EncodedWord {
            indices: e.phones.iter().map(|p| vocab.lookup(p)).collect(),
            labels: e.boundaries.clone(),
        })
        .collect()
}

/// Decodes with the head the config selects.
pub fn predict_labels(
    emissions: &Tensor,
    crf: &CrfParameters,
    head: OutputHead,
    true_len: usize,
) -> Vec<u8> {
    match head {
        OutputHead::Crf => crf::viterbi_decode(emissions, crf, true_len).labels,
        OutputHead::Softmax => crf::softmax_decode(emissions, true_len).labels,
    }
}

fn word_loss_and_grads(
    word: &EncodedWord,
    params: &ModelParameters,
    config: &ModelConfig,
    word_seed: u64,
) -> Result<(Real, ModelParameters), TrainError> {
    let true_len = word.indices.len();
    let mut rng = Rng::from_seed(word_seed);
    let trace = forward(&word.indices, true_len, params, config, Mode::Train, &mut rng)?;
    let (loss, d_emissions, d_transition, d_start) = match config.output_head {
        OutputHead::Crf => {
            let (loss, de, dt, ds) =
                crf::crf_nll_with_grad(&trace.emissions, &params.crf, &word.labels, true_len);
            (loss, de, Some(dt), Some(ds))
        }
        OutputHead::Softmax => {
            let (loss, de) = crf::softmax_nll_with_grad(&trace.emissions, &word.labels, true_len);
            (loss, de, None, None)
        }
    };
    let mut grads = backward(&trace, &d_emissions, params, config);
    if let (Some(dt), Some(ds)) = (d_transition, d_start) {
        grads.crf.transition = dt;
        grads.crf.start = ds;
    }
    Ok((loss, grads))
}

fn mean_eval_loss(
    words: &[EncodedWord],
    params: &ModelParameters,
    config: &ModelConfig,
) -> Result<Real, TrainError> {
    let total: Real = words
        .par_iter()
        .map(|w| -> Result<Real, TrainError> {
            let true_len = w.indices.len();
            let mut rng = Rng::from_seed(0);
            let emissions =
                network::encode(&w.indices, true_len, params, config, Mode::Eval, &mut rng)?;
            Ok(match config.output_head {
                OutputHead::Crf => crf::crf_nll(&emissions, &params.crf, &w.labels, true_len),
                OutputHead::Softmax => {
                    crf::softmax_nll_with_grad(&emissions, &w.labels, true_len).0
                }
            })
        })
        .try_reduce(|| 0.0, |a, b| Ok(a + b))?;
    Ok(total / words.len() as Real)
}

fn accuracy_over_words(
    words: &[EncodedWord],
    params: &ModelParameters,
    config: &ModelConfig,
) -> Result<Real, TrainError> {
    let correct: usize = words
        .par_iter()
        .map(|w| -> Result<usize, TrainError> {
            let true_len = w.indices.len();
            let mut rng = Rng::from_seed(0);
            let emissions =
                network::encode(&w.indices, true_len, params, config, Mode::Eval, &mut rng)?;
            let predicted = predict_labels(&emissions, &params.crf, config.output_head, true_len);
            Ok(usize::from(predicted == w.labels))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(correct as Real / words.len() as Real)
}

/// Fraction of entries whose full decoded label sequence matches gold.
pub fn evaluate_word_accuracy(
    params: &ModelParameters,
    config: &ModelConfig,
    vocab: &PhoneVocabulary,
    entries: &[SyllabifiedEntry],
) -> Result<Real, TrainError> {
    if entries.is_empty() {
        return Err(TrainError::EmptyDataset { which: "evaluation" });
    }
    accuracy_over_words(&encode_words(entries, vocab), params, config)
}

/// Trains a model on the split: per epoch, shuffle and batch the training
/// set, take one clipped Adam step per batch on the mean per-word loss,
/// then score dev word accuracy. Stops after `patience` epochs without
/// strict improvement (or at `max_epochs`) and restores the best epoch's
/// parameters. Bit-reproducible for a given `(config, split, seed)`.
pub fn train(
    config: &ModelConfig,
    split: &DatasetSplit,
    vocab: &PhoneVocabulary,
    seed: u64,
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainingRun, TrainError> {
    if split.train.is_empty() {
        return Err(TrainError::EmptyDataset { which: "train" });
    }
    if split.dev.is_empty() {
        return Err(TrainError::EmptyDataset { which: "dev" });
    }
    let train_words = encode_words(&split.train, vocab);
    let dev_words = encode_words(&split.dev, vocab);

    let mut rng = Rng::from_seed(seed);
    let mut params = ModelParameters::init(config, vocab.size(), &mut rng);
    let mut adam: Vec<AdamState> = params
        .tensors()
        .iter()
        .map(|t| AdamState::new(t.shape(), AdamParams::default()))
        .collect();

    let higher_is_better = options.early_stopping_metric == EarlyStoppingMetric::DevAccuracy;
    let mut stopper = EarlyStopping::new(higher_is_better, config.patience);
    let mut history = Vec::new();
    let mut best_epoch = 0;
    let mut best_params = params.clone();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let batches = make_batches(train_words.len(), config.batch_size, &mut rng);
        let mut epoch_loss_sum = 0.0;
        for (batch_index, batch) in batches.iter().enumerate() {
            let word_seeds: Vec<u64> = batch.iter().map(|_| rng.next_u64()).collect();
            let tasks: Vec<(&[usize], &[u64])> = batch
                .chunks(GRAD_CHUNK)
                .zip(word_seeds.chunks(GRAD_CHUNK))
                .collect();
            let chunk_results: Result<Vec<(Real, ModelParameters)>, TrainError> = tasks
                .into_par_iter()
                .map(|(word_ids, seeds)| {
                    let mut loss_sum = 0.0;
                    let mut acc: Option<ModelParameters> = None;
                    for (&wi, &ws) in word_ids.iter().zip(seeds) {
                        let (loss, grads) =
                            word_loss_and_grads(&train_words[wi], &params, config, ws)?;
                        loss_sum += loss;
                        match &mut acc {
                            Some(a) => a.add_scaled(&grads, 1.0),
                            None => acc = Some(grads),
                        }
                    }
                    Ok((loss_sum, acc.expect("chunks are non-empty")))
                })
                .collect();

            let mut grads = params.zeros_like();
            let mut batch_loss_sum = 0.0;
            for (chunk_loss, chunk_grads) in chunk_results? {
                batch_loss_sum += chunk_loss;
                grads.add_scaled(&chunk_grads, 1.0);
            }
            let batch_len = batch.len() as Real;
            let batch_loss = batch_loss_sum / batch_len;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                });
            }
            let scale = 1.0 / batch_len;
            for t in grads.tensors_mut() {
                t.scale(scale);
            }
            clip_global_norm(&mut grads.tensors_mut(), config.clip_threshold);
            for ((p, g), st) in params
                .tensors_mut()
                .into_iter()
                .zip(grads.tensors())
                .zip(adam.iter_mut())
            {
                adam_step(p, g, st)?;
            }
            epoch_loss_sum += batch_loss_sum;
        }

        let train_loss = epoch_loss_sum / train_words.len() as Real;
        let dev_word_accuracy = accuracy_over_words(&dev_words, &params, config)?;
        let stats = EpochStats {
            epoch,
            train_loss,
            dev_word_accuracy,
        };
        history.push(stats.clone());
        on_epoch(&stats);

        let metric_value = match options.early_stopping_metric {
            EarlyStoppingMetric::DevAccuracy => dev_word_accuracy,
            EarlyStoppingMetric::DevLoss => mean_eval_loss(&dev_words, &params, config)?,
        };
        if stopper.observe(metric_value) {
            best_epoch = epoch;
            best_params = params.clone();
        }
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainingRun {
        epoch_history: history,
        best_epoch,
        stopped_early,
        final_params: best_params,
        seed,
    })
}

/// Accuracy summary over repeated trainings. The deviation is the sample
/// standard deviation (n - 1 denominator), reported as 0 for a single run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub repetitions: usize,
    pub per_run_test_accuracy: Vec<Real>,
    pub mean: Real,
    pub std_dev: Real,
}

impl ExperimentReport {
    pub fn from_accuracies(per_run_test_accuracy: Vec<Real>) -> Self {
        let n = per_run_test_accuracy.len();
        let mean = per_run_test_accuracy.iter().sum::<Real>() / n as Real;
        let std_dev = if n < 2 {
            0.0
        } else {
            let ss: Real = per_run_test_accuracy
                .iter()
                .map(|a| (a - mean) * (a - mean))
                .sum();
            (ss / (n as Real - 1.0)).sqrt()
        };
        ExperimentReport {
            repetitions: n,
            per_run_test_accuracy,
            mean,
            std_dev,
        }
    }

    /// Percentage `mean ± sigma` row, e.g. `99.2 ± 0.3`.
    pub fn format_row(&self) -> String {
        format!("{:.1} ± {:.1}", self.mean * 100.0, self.std_dev * 100.0)
    }
}

/// Trains `repetitions` models on the same split with seeds
/// `base_seed..base_seed + repetitions` (only initialization and shuffling
/// vary) and reports test-set accuracy as mean ± sample standard deviation.
pub fn run_experiment(
    config: &ModelConfig,
    split: &DatasetSplit,
    repetitions: usize,
    base_seed: u64,
) -> Result<ExperimentReport, TrainError> {
    assert!(repetitions >= 1);
    if split.test.is_empty() {
        return Err(TrainError::EmptyDataset { which: "test" });
    }
    let vocab = vocabulary_for_split(split);
    let mut accuracies = Vec::with_capacity(repetitions);
    for rep in 0..repetitions {
        let seed = base_seed + rep as u64;
        let run = train(config, split, &vocab, seed, &TrainOptions::default(), |_| {})?;
        let accuracy = evaluate_word_accuracy(&run.final_params, config, &vocab, &split.test)?;
        accuracies.push(accuracy);
    }
    Ok(ExperimentReport::from_accuracies(accuracies))
}
