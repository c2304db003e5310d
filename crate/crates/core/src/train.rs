//! Training loop, evaluation metrics and multi-sample inference.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::data::{augment, AugmentParams, Dataset};
use crate::error::{Error, Result};
use crate::model::{Batch, Model, ModelConfig, Task};
use crate::optim::{adam_step, cosine_lr, OptimizerState};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Random scale, jitter and shift on training clouds.
    pub augment: bool,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    /// Recorded in the metrics header; computation is single-threaded.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 60,
            seed: 0,
            augment: true,
            checkpoint: None,
            metrics: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Evaluation summary. For segmentation, `oa` and `mca` are per point and
/// per part label.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub oa: f64,
    pub mca: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou_cls: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou_ins: Option<f64>,
}

impl Metrics {
    /// Model-selection score: instance mIoU for segmentation, else OA.
    pub fn score(&self) -> f64 {
        self.miou_ins.unwrap_or(self.oa)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub wall_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best: Metrics,
}

/// Path of the JSON model-config sidecar written next to a checkpoint.
pub fn config_sidecar(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_config(cfg: &ModelConfig, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg).expect("config serialises");
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Checks that `ds` can feed `cfg`. Clouds may be larger than the model's
/// point count only when `allow_larger` (multi-sample inference).
pub fn check_dataset(cfg: &ModelConfig, ds: &Dataset, allow_larger: bool) -> Result<()> {
    let n = cfg.points_per_sample;
    let mismatch = |what: String| Err(Error::DatasetMismatch(what));
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if ds.num_points != n && !(allow_larger && ds.num_points > n) {
        return mismatch(format!("{} points per cloud, model expects {n}", ds.num_points));
    }
    if ds.extra_dim != cfg.extra_channels {
        return mismatch(format!("{} extra channels, model expects {}", ds.extra_dim, cfg.extra_channels));
    }
    if ds.segmentation != (cfg.task == Task::PartSegmentation) {
        return mismatch(format!("segmentation payload is {}, model task is {}", ds.segmentation, cfg.task));
    }
    if ds.num_classes > cfg.num_classes {
        return mismatch(format!("{} labels, model has {} outputs", ds.num_classes, cfg.num_classes));
    }
    Ok(())
}

/// Mean cross-entropy over clouds, or over every point for segmentation.
pub fn loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

fn sample_extras(ds: &Dataset, i: usize) -> Vec<f64> {
    ds.samples[i].extras.iter().map(|&v| v as f64).collect()
}

/// Builds the batch for samples `idx`, optionally augmenting positions.
/// Returns the batch and its flattened targets.
fn make_batch<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    idx: &[usize],
    aug: Option<(&AugmentParams, &mut ChaCha8Rng)>,
) -> Result<(Batch<T>, Vec<usize>)> {
    let mut clouds: Vec<Vec<[f64; 3]>> = idx.iter().map(|&i| ds.samples[i].points()).collect();
    if let Some((p, rng)) = aug {
        for c in &mut clouds {
            augment(c, p, rng);
        }
    }
    let extras: Vec<Vec<f64>> = idx.iter().map(|&i| sample_extras(ds, i)).collect();
    let cats: Vec<usize> = idx.iter().map(|&i| ds.samples[i].label as usize).collect();
    let batch = model.prepare(
        &clouds,
        (ds.extra_dim > 0).then_some(&extras[..]),
        ds.segmentation.then_some(&cats[..]),
    )?;
    let labels = if ds.segmentation {
        idx.iter()
            .flat_map(|&i| ds.samples[i].point_labels.as_ref().expect("segmentation labels"))
            .map(|&l| l as usize)
            .collect()
    } else {
        cats
    };
    Ok((batch, labels))
}

struct MetricsLog {
    out: Option<BufWriter<File>>,
    path: PathBuf,
}

impl MetricsLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        let out = match path {
            Some(p) => Some(BufWriter::new(File::create(p).map_err(|source| Error::Io {
                path: p.to_path_buf(),
                source,
            })?)),
            None => None,
        };
        Ok(Self {
            out,
            path: path.map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    fn line(&mut self, v: &impl Serialize) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            let io = |source| Error::Io {
                path: self.path.clone(),
                source,
            };
            serde_json::to_writer(&mut *w, v).map_err(|e| io(e.into()))?;
            w.write_all(b"\n").map_err(io)?;
            w.flush().map_err(io)?;
        }
        Ok(())
    }
}

/// Trains `model` in place. After every epoch the model is evaluated on
/// `eval_set` (the training set when absent), a record is appended to the
/// metrics stream and the checkpoint is rewritten if the score improved.
pub fn train<T: Real>(model: &mut Model<T>, train_set: &Dataset, eval_set: Option<&Dataset>, tc: &TrainConfig) -> Result<TrainReport> {
    tc.validate()?;
    check_dataset(&model.cfg, train_set, false)?;
    let eval_set = eval_set.unwrap_or(train_set);
    check_dataset(&model.cfg, eval_set, false)?;

    let mut log = MetricsLog::open(tc.metrics.as_deref())?;
    log.line(&serde_json::json!({
        "model": model.cfg,
        "train": tc,
        "threads": tc.threads,
        "train_samples": train_set.len(),
        "eval_samples": eval_set.len(),
    }))?;
    if let Some(ck) = &tc.checkpoint {
        save_config(&model.cfg, &config_sidecar(ck))?;
    }

    let names = model.store.names().to_vec();
    let mut opt = {
        let refs: Vec<&Tensor<T>> = model.store.values().iter().collect();
        let steps_per_epoch = train_set.len().div_ceil(tc.batch_size);
        OptimizerState::new(&refs, tc.lr, tc.weight_decay, (steps_per_epoch * tc.epochs) as u64)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let aug = AugmentParams::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(usize, Metrics)> = None;
    let start = Instant::now();
    let mut tape = Tape::new();

    for epoch in 0..tc.epochs {
        let lr = cosine_lr(epoch as u64, tc.epochs as u64, tc.lr)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (step, idx) in order.chunks(tc.batch_size).enumerate() {
            let (batch, labels) = make_batch(model, train_set, idx, tc.augment.then_some((&aug, &mut rng)))?;
            tape.reset();
            let f = model.forward(&mut tape, &batch, true, true)?;
            let l = loss(&mut tape, f.logits, &labels)?;
            let lv = tape.value(l).item().as_f64();
            if !lv.is_finite() {
                return Err(Error::NanLoss { epoch, step });
            }
            let grads = tape.backward(l)?;
            let gs: Vec<&Tensor<T>> = f
                .params
                .iter()
                .map(|&v| grads.get(v).ok_or_else(|| Error::InvalidArgument("parameter without gradient".into())))
                .collect::<Result<_>>()?;
            let mut params: Vec<(&str, &mut Tensor<T>)> =
                names.iter().map(String::as_str).zip(model.store.values_mut().iter_mut()).collect();
            adam_step(&mut opt, &mut params, &gs, lr)?;
            model.store.apply_bn_updates(&f.bn_updates);
            loss_sum += lv * idx.len() as f64;
            seen += idx.len();
        }

        let metrics = evaluate(model, eval_set, tc.batch_size)?;
        let rec = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / seen as f64,
            metrics: metrics.clone(),
            wall_s: start.elapsed().as_secs_f64(),
        };
        log.line(&rec)?;
        history.push(rec);
        if best.as_ref().is_none_or(|(_, b)| metrics.score() > b.score()) {
            if let Some(ck) = &tc.checkpoint {
                checkpoint::save(&model.store, ck)?;
            }
            best = Some((epoch, metrics));
        }
    }
    let (best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainReport {
        history,
        best_epoch,
        best,
    })
}

/// Eval-mode logits of every sample, in dataset order, as `f64` rows
/// (`classes` per cloud, or `N * parts` per cloud for segmentation).
pub fn predict_logits<T: Real>(model: &Model<T>, ds: &Dataset, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    check_dataset(&model.cfg, ds, false)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (batch, _) = make_batch(model, ds, chunk, None)?;
        let logits = model.predict(&batch)?;
        let per = logits.numel() / chunk.len();
        out.extend(logits.data().chunks_exact(per).map(|r| r.iter().map(|v| v.as_f64()).collect()));
    }
    Ok(out)
}

/// Numerically stable softmax in `f64`.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Overall accuracy and mean per-class accuracy. Classes absent from
/// `target` are left out of the mean.
pub fn classification_metrics(pred: &[usize], target: &[usize], num_classes: usize) -> Result<(f64, f64)> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::InvalidArgument("predictions and targets must be non-empty and equal in length".into()));
    }
    let mut hit = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(target) {
        if t >= num_classes {
            return Err(Error::LabelRange {
                sample: 0,
                label: t,
                classes: num_classes,
            });
        }
        total[t] += 1;
        hit[t] += (p == t) as usize;
    }
    let oa = hit.iter().sum::<usize>() as f64 / pred.len() as f64;
    let present: Vec<f64> = (0..num_classes)
        .filter(|&c| total[c] > 0)
        .map(|c| hit[c] as f64 / total[c] as f64)
        .collect();
    Ok((oa, present.iter().sum::<f64>() / present.len() as f64))
}

/// IoU of one shape averaged over the parts of its category. A part absent
/// from both prediction and target counts as 1.
pub fn shape_iou(pred: &[usize], target: &[usize], parts: &[usize]) -> f64 {
    if parts.is_empty() {
        return 1.0;
    }
    let mut sum = 0.0;
    for &p in parts {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in pred.iter().zip(target) {
            inter += (a == p && b == p) as usize;
            union += (a == p || b == p) as usize;
        }
        sum += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    sum / parts.len() as f64
}

/// Instance mIoU (mean over shapes) and class mIoU (mean over categories of
/// their shapes' mean).
pub fn miou(preds: &[Vec<usize>], targets: &[Vec<usize>], categories: &[usize], category_parts: &[Vec<usize>]) -> (f64, f64) {
    let mut per_cat: Vec<Vec<f64>> = vec![Vec::new(); category_parts.len()];
    let mut all = Vec::with_capacity(preds.len());
    for ((p, t), &c) in preds.iter().zip(targets).zip(categories) {
        let iou = shape_iou(p, t, &category_parts[c]);
        per_cat[c].push(iou);
        all.push(iou);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let cls: Vec<f64> = per_cat.iter().filter(|v| !v.is_empty()).map(|v| mean(v)).collect();
    (mean(&cls), mean(&all))
}

/// Eval-mode metrics over `ds`. Segmentation predictions are restricted to
/// the part labels of each cloud's category.
pub fn evaluate<T: Real>(model: &Model<T>, ds: &Dataset, batch_size: usize) -> Result<Metrics> {
    let logits = predict_logits(model, ds, batch_size)?;
    metrics_from_scores(model, ds, &logits)
}

/// Metrics from per-sample scores (logits or probabilities).
pub fn metrics_from_scores<T: Real>(model: &Model<T>, ds: &Dataset, scores: &[Vec<f64>]) -> Result<Metrics> {
    let classes = model.cfg.num_classes;
    if !ds.segmentation {
        let pred: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
        let target: Vec<usize> = ds.samples.iter().map(|s| s.label as usize).collect();
        let (oa, mca) = classification_metrics(&pred, &target, classes)?;
        return Ok(Metrics {
            oa,
            mca,
            ..Metrics::default()
        });
    }
    let parts = ds.category_parts();
    let mut preds = Vec::with_capacity(ds.len());
    let mut targets = Vec::with_capacity(ds.len());
    let mut cats = Vec::with_capacity(ds.len());
    for (s, row) in ds.samples.iter().zip(scores) {
        let allowed = &parts[s.label as usize];
        let pred: Vec<usize> = row
            .chunks_exact(classes)
            .map(|r| {
                let mut best = allowed[0];
                for &p in allowed {
                    if r[p] > r[best] {
                        best = p;
                    }
                }
                best
            })
            .collect();
        preds.push(pred);
        targets.push(s.point_labels.as_ref().expect("segmentation labels").iter().map(|&l| l as usize).collect::<Vec<_>>());
        cats.push(s.label as usize);
    }
    let flat_p: Vec<usize> = preds.iter().flatten().copied().collect();
    let flat_t: Vec<usize> = targets.iter().flatten().copied().collect();
    let (oa, mca) = classification_metrics(&flat_p, &flat_t, classes)?;
    let (cls, ins) = miou(&preds, &targets, &cats, &parts);
    Ok(Metrics {
        oa,
        mca,
        miou_cls: Some(cls),
        miou_ins: Some(ins),
    })
}

/// Sorted indices of an `m`-point subsample of `total` points drawn without
/// replacement. Keeping the original order makes `m == total` an identity.
fn subsample(total: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, total, m).into_vec();
    idx.sort_unstable();
    idx
}

/// Copy of `ds` keeping points `idx_of(i)` of sample `i`.
fn select_points(ds: &Dataset, m: usize, mut idx_of: impl FnMut(usize) -> Vec<usize>) -> Dataset {
    let e = ds.extra_dim;
    let samples = ds
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let idx = idx_of(i);
            let mut out = s.clone();
            out.positions = idx.iter().flat_map(|&p| s.positions[3 * p..3 * p + 3].iter().copied()).collect();
            out.extras = idx.iter().flat_map(|&p| s.extras[e * p..e * (p + 1)].iter().copied()).collect();
            out.point_labels = s.point_labels.as_ref().map(|l| idx.iter().map(|&p| l[p]).collect());
            out
        })
        .collect();
    Dataset {
        num_points: m,
        samples,
        ..ds.clone()
    }
}

/// The first `m` points of every cloud: the single-pass baseline that
/// multi-sample inference is compared against.
pub fn truncate_points(ds: &Dataset, m: usize) -> Result<Dataset> {
    if m > ds.num_points {
        return Err(Error::InvalidArgument(format!("cannot keep {m} of {} points", ds.num_points)));
    }
    Ok(select_points(ds, m, |_| (0..m).collect()))
}

/// Multi-sample inference over a classification dataset: for each of
/// `repeats` rounds every cloud is subsampled to the model's point count
/// and the eval-mode softmax outputs are averaged. Sample `i` draws from
/// stream `i` of a generator seeded with `seed`.
pub fn msi_probabilities<T: Real>(model: &Model<T>, ds: &Dataset, repeats: usize, seed: u64, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let m = model.cfg.points_per_sample;
    if repeats == 0 {
        return Err(Error::InvalidArgument("multi-sample inference needs at least one repeat".into()));
    }
    if model.cfg.task != Task::Classification {
        return Err(Error::InvalidArgument("multi-sample inference is defined for classification".into()));
    }
    check_dataset(&model.cfg, ds, true)?;
    let mut rngs: Vec<ChaCha8Rng> = (0..ds.len())
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let mut acc: Vec<Vec<f64>> = vec![vec![0.0; model.cfg.num_classes]; ds.len()];
    for _ in 0..repeats {
        let sub = select_points(ds, m, |i| subsample(ds.num_points, m, &mut rngs[i]));
        for (a, l) in acc.iter_mut().zip(predict_logits(model, &sub, batch_size)?) {
            for (x, p) in a.iter_mut().zip(softmax(&l)) {
                *x += p;
            }
        }
    }
    let r = repeats as f64;
    Ok(acc.into_iter().map(|a| a.into_iter().map(|v| v / r).collect()).collect())
}

/// Multi-sample prediction for one cloud of `M >= m` points: the mean of
/// the softmax over `repeats` random `m`-point subsamples.
pub fn msi_predict<T: Real>(model: &Model<T>, cloud: &[[f64; 3]], extras: Option<&[f64]>, repeats: usize, seed: u64) -> Result<Vec<f64>> {
    let m = model.cfg.points_per_sample;
    if cloud.len() < m {
        return Err(Error::InvalidArgument(format!("cloud has {} points, subsample needs {m}", cloud.len())));
    }
    let e = model.cfg.extra_channels;
    let ds = Dataset {
        num_points: cloud.len(),
        extra_dim: e,
        num_classes: model.cfg.num_classes,
        segmentation: false,
        samples: vec![crate::data::Sample {
            extras: extras.unwrap_or(&[]).iter().map(|&v| v as f32).collect(),
            ..crate::data::Sample::from_points(cloud, 0, None)
        }],
    };
    Ok(msi_probabilities(model, &ds, repeats, seed, 1)?.remove(0))
}
