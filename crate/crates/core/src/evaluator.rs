//! Frozen-feature evaluation: nearest-neighbor retrieval, linear probing and
//! the ablation grid over loss configurations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::{center_clip, stack_clips};
use crate::config::RunConfig;
use crate::dataset::{SyntheticConfig, Video, generate_videos};
use crate::encoder::{self, EncoderConfig, Params};
use crate::error::{HdcError, Result};
use crate::loss::LossConfig;
use crate::seeding::{self, stream};
use crate::tensor::GradTape;
use crate::trainer::{TrainOutputs, pretrain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Composite,
    Appearance,
    Motion,
}

impl LabelMode {
    pub const ALL: [LabelMode; 3] = [
        LabelMode::Composite,
        LabelMode::Appearance,
        LabelMode::Motion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LabelMode::Composite => "composite",
            LabelMode::Appearance => "appearance",
            LabelMode::Motion => "motion",
        }
    }

    pub fn label(self, video: &Video, dataset: &SyntheticConfig) -> u32 {
        match self {
            LabelMode::Composite => {
                video.appearance_label * dataset.motion_classes() as u32 + video.motion_label
            }
            LabelMode::Appearance => video.appearance_label,
            LabelMode::Motion => video.motion_label,
        }
    }
}

/// One row of the ablation grid: enabled scales and weights for each subtask.
/// `alphas[i]` weights `spatial_scales[i]`, likewise for `betas`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRow {
    pub spatial_scales: Vec<usize>,
    pub temporal_scales: Vec<usize>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

fn join<T: ToString>(v: &[T]) -> String {
    if v.is_empty() {
        "-".into()
    } else {
        v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
    }
}

impl GridRow {
    pub fn new(sc: &[usize], tc: &[usize], alphas: &[f64], betas: &[f64]) -> Self {
        GridRow {
            spatial_scales: sc.to_vec(),
            temporal_scales: tc.to_vec(),
            alphas: alphas.to_vec(),
            betas: betas.to_vec(),
        }
    }

    /// `SC scales / TC scales / alphas / betas`, `-` for an empty field.
    pub fn label(&self) -> String {
        format!(
            "{} / {} / {} / {}",
            join(&self.spatial_scales),
            join(&self.temporal_scales),
            join(&self.alphas),
            join(&self.betas)
        )
    }

    pub fn loss_config(&self, tau: f64) -> Result<LossConfig> {
        if self.alphas.len() != self.spatial_scales.len()
            || self.betas.len() != self.temporal_scales.len()
        {
            return Err(HdcError::Config(format!(
                "grid row {}: one weight per enabled scale required",
                self.label()
            )));
        }
        let cfg = LossConfig {
            tau,
            alphas: self
                .spatial_scales
                .iter()
                .copied()
                .zip(self.alphas.iter().copied())
                .collect(),
            betas: self
                .temporal_scales
                .iter()
                .copied()
                .zip(self.betas.iter().copied())
                .collect(),
            spatial_scales: self.spatial_scales.clone(),
            temporal_scales: self.temporal_scales.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn is_scratch(&self) -> bool {
        self.alphas.iter().chain(&self.betas).all(|w| *w == 0.0)
    }
}

/// The seven loss configurations of the reference ablation table, followed
/// by an all-zero row that leaves the encoder untrained.
pub fn default_grid() -> Vec<GridRow> {
    vec![
        GridRow::new(&[5], &[], &[1.0], &[]),
        GridRow::new(&[], &[5], &[], &[1.0]),
        GridRow::new(&[5], &[5], &[1.0], &[1.0]),
        GridRow::new(&[4, 5], &[4, 5], &[1.0, 1.0], &[1.0, 1.0]),
        GridRow::new(&[4, 5], &[4, 5], &[0.5, 1.0], &[0.5, 1.0]),
        GridRow::new(&[3, 4, 5], &[3, 4, 5], &[1.0; 3], &[1.0; 3]),
        GridRow::new(&[3, 4, 5], &[3, 4, 5], &[0.25, 0.5, 1.0], &[0.25, 0.5, 1.0]),
        GridRow::new(&[3, 4, 5], &[3, 4, 5], &[0.0; 3], &[0.0; 3]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorConfig {
    pub ks: Vec<usize>,
    /// Fraction of videos, chosen by hashed id, used as retrieval queries.
    pub query_fraction: f64,
    pub label_mode: LabelMode,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub grid: Vec<GridRow>,
    pub grid_seeds: Vec<u64>,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig {
            ks: vec![1, 5, 10, 20, 50],
            query_fraction: 0.3,
            label_mode: LabelMode::Composite,
            probe_epochs: 50,
            probe_lr: 0.1,
            grid: default_grid(),
            grid_seeds: vec![0, 1, 2],
        }
    }
}

impl EvaluatorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HdcError::Config(format!("evaluator: {m}")));
        if self.ks.is_empty() || self.ks.contains(&0) {
            return fail("ks must be non-empty and positive".into());
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return fail(format!(
                "query_fraction must lie in (0, 1), got {}",
                self.query_fraction
            ));
        }
        if !(self.probe_lr > 0.0 && self.probe_lr.is_finite()) {
            return fail("probe_lr must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub vector: Vec<f32>,
    pub video_id: u32,
    pub label: u32,
}

/// Pooled last-block features of the center clip of every video, before any
/// projection head. Returned in input order.
pub fn extract_embeddings(
    encoder_config: &EncoderConfig,
    params: &Params<f32>,
    videos: &[Video],
    clip_len: usize,
    crop: [usize; 2],
    label: impl Fn(&Video) -> u32 + Sync,
) -> Result<Vec<EmbeddingRecord>> {
    params.check_matches(encoder_config)?;
    const CHUNK: usize = 8;
    let chunks = videos
        .par_chunks(CHUNK)
        .map(|chunk| {
            let clips = chunk
                .iter()
                .map(|v| center_clip(&v.clip, clip_len, crop))
                .collect::<Result<Vec<_>>>()?;
            let mut tape = GradTape::new();
            let bound = encoder::bind(&mut tape, params, false);
            let input = tape.constant(stack_clips(&clips)?);
            let pyramid = encoder::forward(&mut tape, encoder_config, &bound, input)?;
            let pooled = tape.global_pool(pyramid.last_block)?;
            let dim = tape.shape(pooled)[1];
            let data = tape.value(pooled).data();
            Ok(chunk
                .iter()
                .zip(data.chunks(dim))
                .map(|(v, row)| EmbeddingRecord {
                    vector: row.to_vec(),
                    video_id: v.id,
                    label: label(v),
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Whether `video_id` lands in the query split. Fixed per id, independent of
/// the run seed.
pub fn is_query(video_id: u32, fraction: f64) -> bool {
    let h = seeding::derive_seed(&[stream::SPLIT, u64::from(video_id)]);
    ((h >> 11) as f64 / (1u64 << 53) as f64) < fraction
}

/// Partitions records into `(queries, gallery)`.
pub fn split_records(
    records: Vec<EmbeddingRecord>,
    fraction: f64,
) -> (Vec<EmbeddingRecord>, Vec<EmbeddingRecord>) {
    records
        .into_iter()
        .partition(|r| is_query(r.video_id, fraction))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    /// Fraction of queries with a same-label hit in the top `k`, per `ks` entry.
    pub accuracy: Vec<f64>,
    pub queries: usize,
    pub gallery: usize,
}

impl RetrievalReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks
            .iter()
            .position(|x| *x == k)
            .map(|i| self.accuracy[i])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,accuracy\n");
        for (k, a) in self.ks.iter().zip(&self.accuracy) {
            writeln!(s, "{k},{a}").unwrap();
        }
        s
    }
}

fn unit(v: &[f32], which: &'static str, row: usize) -> Result<Vec<f64>> {
    let norm = v
        .iter()
        .map(|x| f64::from(*x) * f64::from(*x))
        .sum::<f64>()
        .sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(HdcError::ZeroNorm { which, row });
    }
    Ok(v.iter().map(|x| f64::from(*x) / norm).collect())
}

/// Gallery indices sorted by cosine similarity to `query`, most similar
/// first, ties broken by ascending video id.
pub fn rank_gallery(query: &[f64], gallery: &[(Vec<f64>, u32)]) -> Vec<usize> {
    let sims: Vec<f64> = gallery
        .iter()
        .map(|(g, _)| g.iter().zip(query).map(|(a, b)| a * b).sum())
        .collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .total_cmp(&sims[a])
            .then(gallery[a].1.cmp(&gallery[b].1))
    });
    order
}

pub fn nn_retrieval(
    queries: &[EmbeddingRecord],
    gallery: &[EmbeddingRecord],
    ks: &[usize],
) -> Result<RetrievalReport> {
    if gallery.is_empty() || queries.is_empty() {
        return Err(HdcError::InvalidArgument(
            "retrieval needs non-empty queries and gallery".into(),
        ));
    }
    let gallery_ids: BTreeSet<u32> = gallery.iter().map(|r| r.video_id).collect();
    if let Some(q) = queries.iter().find(|q| gallery_ids.contains(&q.video_id)) {
        return Err(HdcError::InvalidArgument(format!(
            "video {} appears in both queries and gallery",
            q.video_id
        )));
    }
    let g: Vec<(Vec<f64>, u32)> = gallery
        .iter()
        .enumerate()
        .map(|(i, r)| Ok((unit(&r.vector, "gallery", i)?, r.video_id)))
        .collect::<Result<_>>()?;
    let mut hits = vec![0usize; ks.len()];
    for (qi, q) in queries.iter().enumerate() {
        let order = rank_gallery(&unit(&q.vector, "query", qi)?, &g);
        // Rank of the first same-label gallery entry, if any.
        let first = order.iter().position(|&i| gallery[i].label == q.label);
        for (slot, k) in ks.iter().enumerate() {
            if first.is_some_and(|r| r < *k) {
                hits[slot] += 1;
            }
        }
    }
    Ok(RetrievalReport {
        ks: ks.to_vec(),
        accuracy: hits
            .iter()
            .map(|h| *h as f64 / queries.len() as f64)
            .collect(),
        queries: queries.len(),
        gallery: gallery.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Softmax regression on frozen features, trained by per-example SGD.
/// Features are standardized with training-split statistics.
pub fn linear_probe(
    train: &[EmbeddingRecord],
    test: &[EmbeddingRecord],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ProbeReport> {
    if train.is_empty() || test.is_empty() {
        return Err(HdcError::InvalidArgument(
            "probe needs non-empty train and test splits".into(),
        ));
    }
    let dim = train[0].vector.len();
    if train.iter().chain(test).any(|r| r.vector.len() != dim) {
        return Err(HdcError::shape("linear_probe", "feature dimensions differ"));
    }
    // Test classes missing from the training split keep a logit that only
    // ever gets pushed down, so they count as misses.
    let classes = train.iter().chain(test).map(|r| r.label).max().expect("non-empty") as usize + 1;

    let n = train.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for r in train {
        for (m, x) in mean.iter_mut().zip(&r.vector) {
            *m += f64::from(*x) / n;
        }
    }
    let mut std = vec![0.0f64; dim];
    for r in train {
        for ((s, m), x) in std.iter_mut().zip(&mean).zip(&r.vector) {
            *s += (f64::from(*x) - m).powi(2) / n;
        }
    }
    let std: Vec<f64> = std
        .into_iter()
        .map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    let prep = |r: &EmbeddingRecord| -> Vec<f64> {
        r.vector
            .iter()
            .zip(&mean)
            .zip(&std)
            .map(|((x, m), s)| (f64::from(*x) - m) / s)
            .collect()
    };
    let xs: Vec<Vec<f64>> = train.iter().map(prep).collect();

    let mut w = vec![0.0f64; classes * dim];
    let mut b = vec![0.0f64; classes];
    let logits = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| b[c] + w[c * dim..(c + 1) * dim].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    };
    let mut rng = seeding::rng_from(&[seed, stream::PROBE]);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let x = &xs[i];
            let z = logits(&w, &b, x);
            let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
            let sum: f64 = e.iter().sum();
            for c in 0..classes {
                let g = e[c] / sum - if c as u32 == train[i].label { 1.0 } else { 0.0 };
                b[c] -= lr * g;
                for (wv, xv) in w[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                    *wv -= lr * g * xv;
                }
            }
        }
    }
    let accuracy = |records: &[EmbeddingRecord]| {
        let correct = records
            .iter()
            .filter(|r| {
                let z = logits(&w, &b, &prep(r));
                let best = (0..classes)
                    .max_by(|&a, &c| z[a].total_cmp(&z[c]).then(c.cmp(&a)))
                    .expect("classes > 0");
                best as u32 == r.label
            })
            .count();
        correct as f64 / records.len() as f64
    };
    Ok(ProbeReport {
        train_accuracy: accuracy(train),
        test_accuracy: accuracy(test),
    })
}

/// Retrieval results for one trained (or untrained) encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub row: GridRow,
    pub seed: u64,
    pub final_loss: f64,
    pub retrieval: BTreeMap<&'static str, RetrievalReport>,
}

impl VariantResult {
    pub fn top1(&self, mode: LabelMode) -> f64 {
        self.retrieval[mode.name()].accuracy[0]
    }
}

/// Retrieval reports under every label mode for the given parameters.
pub fn evaluate_retrieval(
    config: &RunConfig,
    params: &Params<f32>,
    videos: &[Video],
) -> Result<BTreeMap<&'static str, RetrievalReport>> {
    let records = extract_embeddings(
        &config.encoder,
        params,
        videos,
        config.trainer.clip_len,
        config.augmentation.original.crop_output,
        |_| 0,
    )?;
    let mut out = BTreeMap::new();
    let mut ks = vec![1];
    ks.extend(config.evaluator.ks.iter().filter(|k| **k != 1));
    for mode in LabelMode::ALL {
        let relabeled: Vec<EmbeddingRecord> = records
            .iter()
            .zip(videos)
            .map(|(r, v)| EmbeddingRecord {
                label: mode.label(v, &config.dataset),
                ..r.clone()
            })
            .collect();
        let (q, g) = split_records(relabeled, config.evaluator.query_fraction);
        out.insert(mode.name(), nn_retrieval(&q, &g, &ks)?);
    }
    Ok(out)
}

/// Pretrains one grid row for one seed and evaluates retrieval. The corpus,
/// initialization, batches and augmentations all derive from `seed`.
pub fn run_variant(
    base: &RunConfig,
    row: &GridRow,
    seed: u64,
    outputs: &TrainOutputs,
) -> Result<VariantResult> {
    let mut config = base.clone();
    config.seed = seed;
    config.loss = row.loss_config(base.loss.tau)?;
    config.validate()?;
    let videos = generate_videos(&config.dataset, seed)?;
    let trained = pretrain(&config, &videos, outputs, None)?;
    Ok(VariantResult {
        row: row.clone(),
        seed,
        final_loss: trained.log.last().map_or(0.0, |r| r.losses.total),
        retrieval: evaluate_retrieval(&config, &trained.params, &videos)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<GridRow>,
    pub seeds: Vec<u64>,
    /// `results[row][seed]`.
    pub results: Vec<Vec<VariantResult>>,
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationReport {
    /// Top-1 accuracies in percent for one row across seeds.
    pub fn top1(&self, row: usize, mode: LabelMode) -> Vec<f64> {
        self.results[row]
            .iter()
            .map(|r| 100.0 * r.top1(mode))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,spatial_scales,temporal_scales,alphas,betas,seeds");
        for m in LabelMode::ALL {
            write!(s, ",{0}_top1_mean,{0}_top1_sd", m.name()).unwrap();
        }
        s.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            write!(
                s,
                "\"{}\",\"{}\",\"{}\",\"{}\",\"{}\",{}",
                row.label(),
                join(&row.spatial_scales),
                join(&row.temporal_scales),
                join(&row.alphas),
                join(&row.betas),
                self.seeds.len()
            )
            .unwrap();
            for m in LabelMode::ALL {
                let (mean, sd) = mean_sd(&self.top1(i, m));
                write!(s, ",{mean:.4},{sd:.4}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.label().len())
            .max()
            .unwrap_or(0)
            .max("SC / TC / alpha / beta".len());
        let mut s = format!("{:<width$}", "SC / TC / alpha / beta");
        for m in LabelMode::ALL {
            write!(s, "  {:>16}", format!("{} top1", m.name())).unwrap();
        }
        s.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            write!(s, "{:<width$}", row.label()).unwrap();
            for m in LabelMode::ALL {
                let (mean, sd) = mean_sd(&self.top1(i, m));
                write!(s, "  {:>16}", format!("{mean:.1} ± {sd:.1}")).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, body) in [
            ("ablation.csv", self.to_csv()),
            ("ablation.txt", self.to_table()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| HdcError::io(&p, e))?;
        }
        Ok(())
    }
}

/// Pretrains and evaluates every `(row, seed)` pair. Runs are independent
/// and may execute concurrently; results do not depend on scheduling.
pub fn run_ablation_grid(
    base: &RunConfig,
    rows: &[GridRow],
    seeds: &[u64],
    outputs: impl Fn(usize, u64) -> TrainOutputs + Sync,
) -> Result<AblationReport> {
    for row in rows {
        row.loss_config(base.loss.tau)?;
    }
    let jobs: Vec<(usize, u64)> = (0..rows.len())
        .flat_map(|r| seeds.iter().map(move |s| (r, *s)))
        .collect();
    let flat = jobs
        .par_iter()
        .map(|&(r, s)| run_variant(base, &rows[r], s, &outputs(r, s)))
        .collect::<Result<Vec<_>>>()?;
    let mut it = flat.into_iter();
    let results = rows
        .iter()
        .map(|_| it.by_ref().take(seeds.len()).collect())
        .collect();
    Ok(AblationReport {
        rows: rows.to_vec(),
        seeds: seeds.to_vec(),
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(v: &[f32], id: u32, label: u32) -> EmbeddingRecord {
        EmbeddingRecord {
            vector: v.to_vec(),
            video_id: id,
            label,
        }
    }

    #[test]
    fn duplicate_is_top1() {
        let q = [rec(&[0.3, -1.0, 2.0], 0, 4)];
        let g = [
            rec(&[1.0, 0.0, 0.0], 1, 1),
            rec(&[0.3, -1.0, 2.0], 2, 4),
            rec(&[0.0, 1.0, 0.0], 3, 2),
        ];
        let r = nn_retrieval(&q, &g, &[1, 2]).unwrap();
        assert_eq!(r.accuracy, vec![1.0, 1.0]);
    }

    #[test]
    fn identical_labels_always_hit() {
        let q = [rec(&[1.0, 2.0], 0, 0), rec(&[-1.0, 0.5], 1, 0)];
        let g = [rec(&[0.0, 1.0], 2, 0), rec(&[3.0, -1.0], 3, 0)];
        let r = nn_retrieval(&q, &g, &[1, 5]).unwrap();
        assert_eq!(r.accuracy, vec![1.0, 1.0]);
    }

    #[test]
    fn ties_prefer_lower_id() {
        let g = vec![
            (vec![1.0, 0.0], 9),
            (vec![1.0, 0.0], 4),
            (vec![0.0, 1.0], 1),
        ];
        assert_eq!(rank_gallery(&[1.0, 0.0], &g), vec![1, 0, 2]);
    }

    #[test]
    fn overlap_and_zero_norm_rejected() {
        let q = [rec(&[1.0], 3, 0)];
        assert!(nn_retrieval(&q, &[rec(&[1.0], 3, 0)], &[1]).is_err());
        assert!(matches!(
            nn_retrieval(&q, &[rec(&[0.0], 4, 0)], &[1]),
            Err(HdcError::ZeroNorm { .. })
        ));
        assert!(nn_retrieval(&q, &[], &[1]).is_err());
    }

    #[test]
    fn probe_separable_and_unseen_class() {
        let train: Vec<_> = (0..20)
            .map(|i| {
                let c = (i % 2) as u32;
                let x = if c == 0 { -1.0 } else { 1.0 };
                rec(&[x + 0.01 * i as f32, 0.5], i, c)
            })
            .collect();
        let test = [rec(&[-2.0, 0.5], 100, 0), rec(&[2.0, 0.5], 101, 1)];
        let r = linear_probe(&train, &test, 20, 0.1, 0).unwrap();
        assert_eq!(r.test_accuracy, 1.0);
        let unseen = [rec(&[-2.0, 0.5], 102, 2), rec(&[2.0, 0.5], 103, 1)];
        let r = linear_probe(&train, &unseen, 20, 0.1, 0).unwrap();
        assert_eq!(r.test_accuracy, 0.5);
        assert!(linear_probe(&train, &[], 1, 0.1, 0).is_err());
    }

    #[test]
    fn grid_rows() {
        let grid = default_grid();
        assert_eq!(grid.len(), 8);
        assert_eq!(grid[0].label(), "5 / - / 1 / -");
        assert_eq!(
            grid[6].label(),
            "3,4,5 / 3,4,5 / 0.25,0.5,1 / 0.25,0.5,1"
        );
        assert!(grid[7].is_scratch());
        let cfg = grid[0].loss_config(0.07).unwrap();
        assert_eq!(cfg.active_scales(), (vec![5], vec![]));
        assert!(GridRow::new(&[5], &[], &[], &[]).loss_config(0.07).is_err());
    }

    #[test]
    fn split_is_stable() {
        let q: Vec<u32> = (0..1000).filter(|i| is_query(*i, 0.3)).collect();
        let frac = q.len() as f64 / 1000.0;
        assert!((frac - 0.3).abs() < 0.05, "{frac}");
        assert!(q.iter().all(|i| is_query(*i, 0.3)));
    }

    #[test]
    fn composite_labels_are_distinct() {
        let cfg = SyntheticConfig::default();
        let mut seen = BTreeSet::new();
        for a in 0..cfg.appearance_classes() as u32 {
            for m in 0..cfg.motion_classes() as u32 {
                let v = Video {
                    id: 0,
                    clip: crate::dataset::Clip::new(vec![0.0; 3], 1, 1, 1, 3).unwrap(),
                    appearance_label: a,
                    motion_label: m,
                };
                assert!(seen.insert(LabelMode::Composite.label(&v, &cfg)));
            }
        }
    }
}
