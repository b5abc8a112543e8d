//! Phone duration predictor: embedding, bidirectional LSTM and a linear head that
//! regresses log frame counts.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::DurationFrames;
use crate::nn::{scalar, Adam, BiLstm, Embedding, Linear, ParamStore, Precision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationModelConfig {
    pub phone_vocab_size: usize,
    pub embedding_dim: usize,
    /// Width of the concatenated forward and backward states.
    pub recurrent_hidden: usize,
    pub learning_rate: f64,
    pub min_frames: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl DurationModelConfig {
    pub fn new(phone_vocab_size: usize) -> Self {
        Self {
            phone_vocab_size,
            embedding_dim: 256,
            recurrent_hidden: 512,
            learning_rate: 1e-3,
            min_frames: 1,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.phone_vocab_size, self.embedding_dim, self.recurrent_hidden];
        if dims.contains(&0) || self.recurrent_hidden % 2 != 0 {
            return Err(Error::ConfigInvalid(
                "duration model dims must be positive and the recurrent width even".into(),
            ));
        }
        if self.min_frames < 1 || self.learning_rate <= 0.0 {
            return Err(Error::ConfigInvalid(
                "min_frames must be at least 1 and the learning rate positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-phone predicted `ln(frames)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDurationVector(pub Vec<f64>);

impl LogDurationVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `exp`, round to nearest, clamp to at least `min_frames`.
    pub fn to_frames(&self, min_frames: usize) -> DurationFrames {
        let counts = self
            .0
            .iter()
            .map(|&v| (v.exp().round().max(0.0) as usize).max(min_frames.max(1)))
            .collect();
        DurationFrames::new(counts).expect("counts are clamped positive")
    }
}

pub struct DurationModel {
    config: DurationModelConfig,
    store: ParamStore,
    embedding: Embedding,
    lstm: BiLstm,
    head: Linear,
}

impl DurationModel {
    pub fn new(config: DurationModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(config.precision, seed);
        Self::from_store(config, store)
    }

    pub fn from_store(config: DurationModelConfig, mut store: ParamStore) -> Result<Self> {
        config.validate()?;
        let embedding = Embedding::new(
            &mut store,
            "embedding",
            config.phone_vocab_size,
            config.embedding_dim,
        )?;
        let half = config.recurrent_hidden / 2;
        let lstm = BiLstm::new(&mut store, "lstm", config.embedding_dim, half)?;
        let head = Linear::new(&mut store, "head", config.recurrent_hidden, 1)?;
        Ok(Self {
            config,
            store,
            embedding,
            lstm,
            head,
        })
    }

    pub fn config(&self) -> &DurationModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn try_clone(&self) -> Result<Self> {
        Self::from_store(self.config.clone(), self.store.deep_clone()?)
    }

    /// Differentiable forward pass, `(L,)` log durations.
    pub fn forward(&self, phone_ids: &[usize]) -> Result<Tensor> {
        if phone_ids.is_empty() {
            return Ok(Tensor::zeros(0, self.store.dtype(), &Device::Cpu)?);
        }
        let x = self.embedding.forward(phone_ids)?;
        let h = self.lstm.forward(&x)?;
        Ok(self.head.forward(&h)?.squeeze(1)?)
    }

    pub fn duration_forward(&self, phone_ids: &[usize]) -> Result<LogDurationVector> {
        let out = self.forward(phone_ids)?;
        Ok(LogDurationVector(out.to_dtype(DType::F64)?.to_vec1()?))
    }

    pub fn predict_durations(&self, phone_ids: &[usize]) -> Result<DurationFrames> {
        Ok(self
            .duration_forward(phone_ids)?
            .to_frames(self.config.min_frames))
    }
}

/// Mean squared error between predicted and target `ln(frames)`.
pub fn duration_loss(predicted: &Tensor, target: &DurationFrames) -> Result<Tensor> {
    let n = predicted.dim(0)?;
    if n != target.len() {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: target.len(),
        });
    }
    let logs: Vec<f64> = target.counts().iter().map(|&c| (c as f64).ln()).collect();
    let target = Tensor::from_vec(logs, n, &Device::Cpu)?.to_dtype(predicted.dtype())?;
    Ok((predicted - target)?.sqr()?.mean_all()?)
}

pub fn duration_loss_value(predicted: &LogDurationVector, target: &DurationFrames) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::LengthMismatch {
            expected: predicted.len(),
            actual: target.len(),
        });
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = predicted
        .0
        .iter()
        .zip(target.counts())
        .map(|(p, &c)| (p - (c as f64).ln()).powi(2))
        .sum();
    Ok(sum / predicted.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Evaluations without held-out improvement before stopping.
    pub patience: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for DurationTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            eval_every: 50,
            patience: 5,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DurationTrainReport {
    pub losses: Vec<f64>,
    pub holdout_losses: Vec<f64>,
    pub steps_run: usize,
    pub early_stopped: bool,
}

/// Trains on `(phone ids, durations)` pairs with Adam, keeping the parameters with the
/// best held-out loss.
pub fn train_duration_model(
    model: &mut DurationModel,
    pairs: &[(Vec<usize>, DurationFrames)],
    cfg: &DurationTrainConfig,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<DurationTrainReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus("duration training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let n_holdout = if pairs.len() >= 5 {
        ((pairs.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, pairs.len() - 1)
    } else {
        0
    };
    let (holdout, train) = order.split_at(n_holdout);
    let mut train = train.to_vec();

    let mut opt = Adam::new(model.store.vars(), model.config.learning_rate, Some(1.0))?;
    let mut report = DurationTrainReport::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut stale = 0;
    let mut cursor = train.len();
    for step in 0..cfg.steps {
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size.min(train.len()) {
            if cursor >= train.len() {
                train.shuffle(&mut rng);
                cursor = 0;
            }
            let (ids, target) = &pairs[train[cursor]];
            cursor += 1;
            losses.push(duration_loss(&model.forward(ids)?, target)?);
        }
        let loss = (Tensor::stack(&losses, 0)?.mean_all())?;
        let value = scalar(&loss)?;
        opt.backward_step(&loss)?;
        report.losses.push(value);
        report.steps_run = step + 1;
        progress(step, value);

        if !holdout.is_empty() && ((step + 1) % cfg.eval_every.max(1) == 0 || step + 1 == cfg.steps)
        {
            let mut total = 0.0;
            for &i in holdout {
                let (ids, target) = &pairs[i];
                total += duration_loss_value(&model.duration_forward(ids)?, target)?;
            }
            let held = total / holdout.len() as f64;
            report.holdout_losses.push(held);
            if best.as_ref().is_none_or(|(b, _)| held < *b) {
                best = Some((held, model.store.deep_clone()?));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    report.early_stopped = true;
                    break;
                }
            }
        }
    }
    if let Some((_, store)) = best {
        *model = DurationModel::from_store(model.config.clone(), store)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize) -> DurationModel {
        let cfg = DurationModelConfig {
            embedding_dim: 8,
            recurrent_hidden: 8,
            precision: Precision::F64,
            ..DurationModelConfig::new(vocab)
        };
        DurationModel::new(cfg, 1).unwrap()
    }

    #[test]
    fn output_length_matches_input() {
        let m = tiny(10);
        assert_eq!(m.duration_forward(&[1, 2, 3, 4, 5, 6, 7]).unwrap().len(), 7);
        assert!(m.duration_forward(&[]).unwrap().is_empty());
    }

    #[test]
    fn out_of_vocab_is_rejected() {
        let m = tiny(10);
        assert!(matches!(
            m.duration_forward(&[10]),
            Err(Error::IndexOutOfVocab { id: 10, vocab: 10 })
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = tiny(10);
        assert_eq!(
            m.duration_forward(&[1, 2, 3]).unwrap(),
            m.duration_forward(&[1, 2, 3]).unwrap()
        );
    }

    #[test]
    fn loss_examples() {
        let target = DurationFrames::new(vec![3, 1, 7]).unwrap();
        let exact = LogDurationVector(target.counts().iter().map(|&c| (c as f64).ln()).collect());
        assert_eq!(duration_loss_value(&exact, &target).unwrap(), 0.0);
        let shifted = LogDurationVector(exact.0.iter().map(|v| v + 1.0).collect());
        assert!((duration_loss_value(&shifted, &target).unwrap() - 1.0).abs() < 1e-12);
        let t = Tensor::new(shifted.0.as_slice(), &Device::Cpu).unwrap();
        assert!((scalar(&duration_loss(&t, &target).unwrap()).unwrap() - 1.0).abs() < 1e-12);
        let short = LogDurationVector(vec![0.0; 4]);
        assert!(matches!(
            duration_loss_value(&short, &target),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn rounding_and_clamping() {
        let v = LogDurationVector(vec![4.2f64.ln(), 0.3f64.ln(), 2.5f64.ln()]);
        assert_eq!(v.to_frames(1).counts(), [4, 1, 3]);
    }

    #[test]
    fn loss_is_permutation_equivariant() {
        let target = DurationFrames::new(vec![3, 1, 7, 2]).unwrap();
        let pred = LogDurationVector(vec![0.1, 0.9, 2.0, -0.3]);
        let perm = [2, 0, 3, 1];
        let p2 = LogDurationVector(perm.iter().map(|&i| pred.0[i]).collect());
        let t2 = DurationFrames::new(perm.iter().map(|&i| target.counts()[i]).collect()).unwrap();
        let a = duration_loss_value(&pred, &target).unwrap();
        let b = duration_loss_value(&p2, &t2).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn overfits_a_single_pair() {
        let mut m = tiny(6);
        let ids = vec![0, 2, 3, 1, 4, 5, 0];
        let target = DurationFrames::new(vec![5, 3, 8, 2, 4, 6, 9]).unwrap();
        let cfg = DurationTrainConfig {
            steps: 600,
            batch_size: 1,
            ..Default::default()
        };
        train_duration_model(&mut m, &[(ids.clone(), target.clone())], &cfg, &mut |_, _| {})
            .unwrap();
        assert_eq!(m.predict_durations(&ids).unwrap(), target);
    }
}
