//! Built-in verification suites shared by the `gradcheck` and `selfcheck`
//! commands and the test suite.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use std::path::Path;

use crate::augmentation::{Families, make_triplet, stack_clips};
use crate::checkpoint::{Checkpoint, decode_checkpoint, encode_checkpoint};
use crate::config::RunConfig;
use crate::dataset::{SyntheticConfig, generate_videos};
use crate::encoder::{self, BlockConfig, EncoderConfig, Params, init_params};
use crate::error::Result;
use crate::loss::{LossConfig, VariantBatches, hdc_objective, info_nce};
use crate::evaluator::{EmbeddingRecord, nn_retrieval};
use crate::seeding::{Rng, derive_seed, rng_from, stream};
use crate::trainer::{TrainOutputs, pretrain};
use crate::tensor::gradcheck::{GradCheckReport, gradient_check};
use crate::tensor::{GradTape, Padding, Tensor, Var};

pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Small enough that perturbations in the micro-batch never carry a relu
/// input across zero.
pub const GRAD_STEP: f64 = 1e-6;

pub fn normal_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Normal entries pushed away from zero by at least `margin`, so that
/// finite differences never straddle a relu kink.
fn off_zero_tensor(shape: &[usize], margin: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        v.signum() * (v.abs() + margin)
    })
}

/// `sum((out + r)^2)` for a fixed random `r`, which weights every output
/// entry differently.
fn probe_loss(tape: &mut GradTape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = rng_from(&[seed, 99]);
    let r = tape.constant(normal_tensor(tape.shape(out), &mut rng));
    let shifted = tape.add(out, r)?;
    let sq = tape.square(shifted)?;
    tape.sum(sq)
}

fn check(
    label: &str,
    inputs: &[(&str, Tensor<f64>)],
    graph: impl Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    gradient_check(label, graph, inputs, GRAD_TOLERANCE, GRAD_STEP)
}

/// A narrow five-block encoder with the toy strides, small enough for
/// entry-by-entry finite differences.
pub fn micro_encoder() -> EncoderConfig {
    let strides = [[1, 1, 1], [2, 2, 2], [2, 2, 2], [2, 2, 2], [1, 2, 2]];
    EncoderConfig {
        blocks: [2, 3, 3, 4, 4]
            .iter()
            .zip(strides)
            .map(|(&channels, stride)| BlockConfig {
                channels,
                kernel: [3, 3, 3],
                stride,
            })
            .collect(),
        projection_dim: 4,
        ..EncoderConfig::default()
    }
}

/// Two augmented triplets from the toy corpus as `f64` batches.
pub fn micro_batches(seed: u64) -> Result<[Tensor<f64>; 3]> {
    let data = SyntheticConfig {
        num_videos: 2,
        frames_per_video: 16,
        ..SyntheticConfig::default()
    };
    let videos = generate_videos(&data, seed)?;
    let families = Families::default();
    let mut rng = rng_from(&[seed, 7]);
    let triplets = videos
        .iter()
        .map(|v| make_triplet(v, 8, &families, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok([
        stack_clips(triplets.iter().map(|t| &t.original))?.cast(),
        stack_clips(triplets.iter().map(|t| &t.spatial))?.cast(),
        stack_clips(triplets.iter().map(|t| &t.temporal))?.cast(),
    ])
}

/// Parameters with perturbed norm affine terms, so no gradient is trivially
/// symmetric.
pub fn micro_params(config: &EncoderConfig, seed: u64) -> Result<Params<f64>> {
    let mut params: Params<f64> = init_params(config, seed)?;
    let mut rng = rng_from(&[seed, 11]);
    for (name, t) in params.iter_mut() {
        if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") {
            for v in t.data_mut() {
                *v += 0.2 * rng.gen_range(-1.0..1.0);
            }
        }
    }
    Ok(params)
}

/// Finite-difference checks for every differentiable operation and for
/// the full compound objective on a two-video micro-batch.
pub fn gradcheck_suite() -> Result<Vec<GradCheckReport>> {
    let mut rng = rng_from(&[2024, 1]);
    let mut reports = Vec::new();

    let conv_cases = [
        (
            "conv3d same s1",
            [2, 3, 4, 5, 2],
            [3, 3, 3, 2, 3],
            [1, 1, 1],
            Padding::Same,
        ),
        (
            "conv3d same s2",
            [1, 4, 6, 6, 2],
            [3, 3, 3, 2, 2],
            [2, 2, 2],
            Padding::Same,
        ),
        (
            "conv3d valid s121",
            [1, 4, 5, 6, 2],
            [2, 3, 2, 2, 3],
            [1, 2, 1],
            Padding::Valid,
        ),
    ];
    for (label, xs, ks, stride, padding) in conv_cases {
        let inputs = [
            ("input", normal_tensor(&xs, &mut rng)),
            ("kernel", normal_tensor(&ks, &mut rng)),
            ("bias", normal_tensor(&[ks[4]], &mut rng)),
        ];
        reports.push(check(label, &inputs, |t, v| {
            let y = t.conv3d(v[0], v[1], v[2], stride, padding)?;
            probe_loss(t, y, 1)
        })?);
    }

    let inputs = [
        ("input", normal_tensor(&[2, 3, 4, 4, 3], &mut rng)),
        ("gamma", normal_tensor(&[3], &mut rng)),
        ("beta", normal_tensor(&[3], &mut rng)),
    ];
    reports.push(check("instance_norm", &inputs, |t, v| {
        let y = t.instance_norm(v[0], v[1], v[2], 1e-5)?;
        probe_loss(t, y, 2)
    })?);

    let inputs = [("input", off_zero_tensor(&[3, 4, 5], 0.05, &mut rng))];
    reports.push(check("relu", &inputs, |t, v| {
        let y = t.relu(v[0])?;
        probe_loss(t, y, 3)
    })?);

    let x = normal_tensor(&[2, 3, 4, 2, 5], &mut rng);
    reports.push(check("spatial_pool", &[("input", x.clone())], |t, v| {
        let y = t.spatial_pool(v[0])?;
        probe_loss(t, y, 4)
    })?);
    reports.push(check("global_pool", &[("input", x.clone())], |t, v| {
        let y = t.global_pool(v[0])?;
        probe_loss(t, y, 5)
    })?);
    reports.push(check(
        "select_time",
        &[("input", normal_tensor(&[2, 3, 4], &mut rng))],
        |t, v| {
            let y = t.select_time(v[0], 1)?;
            probe_loss(t, y, 6)
        },
    )?);

    let inputs = [
        ("input", normal_tensor(&[3, 5], &mut rng)),
        ("weight", normal_tensor(&[5, 4], &mut rng)),
        ("bias", normal_tensor(&[4], &mut rng)),
    ];
    reports.push(check("linear", &inputs, |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        probe_loss(t, y, 7)
    })?);

    let inputs = [
        ("left", normal_tensor(&[4, 6], &mut rng)),
        ("right", normal_tensor(&[3, 6], &mut rng)),
    ];
    reports.push(check("cosine_similarity", &inputs, |t, v| {
        let y = t.cosine_similarity_matrix(v[0], v[1])?;
        probe_loss(t, y, 8)
    })?);

    let inputs = [("logits", normal_tensor(&[4, 4], &mut rng))];
    reports.push(check("diag_cross_entropy", &inputs, |t, v| {
        t.diag_cross_entropy(v[0])
    })?);

    let inputs = [
        ("a", normal_tensor(&[3, 4], &mut rng)),
        ("b", normal_tensor(&[3, 4], &mut rng)),
    ];
    reports.push(check("scale_add_square_sum", &inputs, |t, v| {
        let s = t.scale(v[0], -1.7)?;
        let y = t.add(s, v[1])?;
        let q = t.square(y)?;
        t.sum(q)
    })?);

    let inputs = [
        ("anchors", normal_tensor(&[5, 8], &mut rng)),
        ("positives", normal_tensor(&[5, 8], &mut rng)),
    ];
    reports.push(check("info_nce", &inputs, |t, v| {
        info_nce(t, v[0], v[1], 0.07)
    })?);

    let config = micro_encoder();
    let params = micro_params(&config, 5)?;
    let batches = micro_batches(5)?;
    let loss = LossConfig::default();
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    let inputs: Vec<(&str, Tensor<f64>)> = params
        .iter()
        .map(|(k, t)| (k.as_str(), t.clone()))
        .collect();
    reports.push(check("hd_nce micro-batch", &inputs, |t, v| {
        let bound = encoder::BoundParams::from_vars(names.iter().cloned().zip(v.iter().copied()));
        let [o, s, tt] = &batches;
        let vars = VariantBatches {
            original: t.constant(o.clone()),
            spatial: t.constant(s.clone()),
            temporal: t.constant(tt.clone()),
        };
        let obj = hdc_objective(t, &config, &loss, &bound, &vars)?;
        Ok(obj.total.expect("all terms active"))
    })?);

    Ok(reports)
}

/// Loss from the explicit similarity matrix: `S = softmax_j(cos(a_i, p_j) / tau)`
/// as the pseudo prediction, the identity as the pseudo label, and
/// `-sum_ij Sbar_ij ln S_ij` as the cross entropy. Plain loops, no tape.
pub fn info_nce_oracle(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let b = anchors.len();
    let mut loss = 0.0;
    for i in 0..b {
        let logits: Vec<f64> = positives
            .iter()
            .map(|p| {
                let dot: f64 = anchors[i].iter().zip(p).map(|(x, y)| x * y).sum();
                dot / (norm(&anchors[i]) * norm(p)) / tau
            })
            .collect();
        let denom: f64 = logits.iter().map(|z| z.exp()).sum();
        for (j, z) in logits.iter().enumerate() {
            let s = z.exp() / denom;
            let target = if i == j { 1.0 } else { 0.0 };
            if target > 0.0 {
                loss -= target * s.ln();
            }
        }
    }
    loss
}

/// Top-k hit rates from a full similarity sort of each gallery, computed by
/// counting for every gallery entry how many others outrank it.
pub fn retrieval_oracle(
    queries: &[(Vec<f64>, u32, u32)],
    gallery: &[(Vec<f64>, u32, u32)],
    ks: &[usize],
) -> Vec<f64> {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut hits = vec![0usize; ks.len()];
    for (qv, _, ql) in queries {
        let sims: Vec<f64> = gallery.iter().map(|(g, _, _)| cos(qv, g)).collect();
        let rank = |i: usize| {
            (0..gallery.len())
                .filter(|&j| sims[j] > sims[i] || (sims[j] == sims[i] && gallery[j].1 < gallery[i].1))
                .count()
        };
        for (slot, k) in ks.iter().enumerate() {
            if (0..gallery.len()).any(|i| gallery[i].2 == *ql && rank(i) < *k) {
                hits[slot] += 1;
            }
        }
    }
    hits.iter().map(|h| *h as f64 / queries.len() as f64).collect()
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckOutcome {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

fn random_rows(rows: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

fn rows_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::new(
        [rows.len(), rows[0].len()],
        rows.iter().flatten().copied().collect(),
    )
    .expect("rectangular rows")
}

/// Largest deviation of `info_nce` from the matrix oracle over `count`
/// random instances with `B <= 8`, `D <= 16`.
pub fn info_nce_oracle_gap(count: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from(&[seed, 21]);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let b = rng.gen_range(2..=8);
        let d = rng.gen_range(1..=16);
        let tau = rng.gen_range(0.05..1.0);
        let a = random_rows(b, d, &mut rng);
        let p = random_rows(b, d, &mut rng);
        let mut tape = GradTape::new();
        let (va, vp) = (tape.constant(rows_tensor(&a)), tape.constant(rows_tensor(&p)));
        let l = info_nce(&mut tape, va, vp, tau)?;
        worst = worst.max((tape.value(l).item() - info_nce_oracle(&a, &p, tau)).abs());
    }
    Ok(worst)
}

/// `|info_nce - B ln B|` when every similarity is equal, for each `B`.
pub fn uniform_similarity_gaps(batches: &[usize]) -> Result<Vec<(usize, f64)>> {
    batches
        .iter()
        .map(|&b| {
            let rows = vec![vec![0.3, -1.2, 2.0, 0.5]; b];
            let mut tape = GradTape::new();
            let va = tape.constant(rows_tensor(&rows));
            let vp = tape.constant(rows_tensor(&rows));
            let l = info_nce(&mut tape, va, vp, 0.07)?;
            Ok((b, (tape.value(l).item() - b as f64 * (b as f64).ln()).abs()))
        })
        .collect()
}

fn micro_objective(loss: &LossConfig) -> Result<f64> {
    let config = micro_encoder();
    let params = micro_params(&config, 5)?;
    let [o, s, t] = micro_batches(5)?;
    let mut tape = GradTape::new();
    let bound = encoder::bind(&mut tape, &params, false);
    let vars = VariantBatches {
        original: tape.constant(o),
        spatial: tape.constant(s),
        temporal: tape.constant(t),
    };
    let obj = hdc_objective(&mut tape, &config, loss, &bound, &vars)?;
    Ok(obj.breakdown.total)
}

/// `|L(c * weights) - c * L(weights)|` on the micro-batch for each factor.
pub fn weight_scaling_gaps(factors: &[f64]) -> Result<Vec<(f64, f64)>> {
    let base = LossConfig::default();
    let l0 = micro_objective(&base)?;
    factors
        .iter()
        .map(|&c| {
            let mut scaled = base.clone();
            scaled.scale_weights(c);
            Ok((c, (micro_objective(&scaled)? - c * l0).abs()))
        })
        .collect()
}

/// Spatial-mode vector counts per tap scale and the largest gap between the
/// global pool and the mean of the spatial-mode pools (raw and projected),
/// for the given encoder on `[2, clip_len, h, w, 3]` input.
pub fn pooling_law(
    config: &EncoderConfig,
    input: [usize; 3],
    seed: u64,
) -> Result<(Vec<(usize, usize, usize)>, f64)> {
    use crate::encoder::{PoolMode, Role, ScaleEmbedding, pool_and_project};
    let params: Params<f64> = init_params(config, seed)?;
    let mut rng = rng_from(&[seed, 31]);
    let [t, h, w] = input;
    let x = Tensor::from_fn([2, t, h, w, config.input_channels], |_| {
        rng.gen_range(-1.0..1.0)
    });
    let mut tape = GradTape::new();
    let bound = encoder::bind(&mut tape, &params, false);
    let xv = tape.constant(x);
    let pyr = encoder::forward(&mut tape, config, &bound, xv)?;
    let scales = config.taps();
    let spatial = pool_and_project(&mut tape, &pyr, &scales, Role::Original, PoolMode::Spatial, &bound)?;
    let global = pool_and_project(&mut tape, &pyr, &scales, Role::Original, PoolMode::Global, &bound)?;
    let mut counts = Vec::new();
    let mut gap: f64 = 0.0;
    for &k in &scales {
        let map = pyr.maps[&k];
        let tk = tape.shape(map)[1];
        let (ScaleEmbedding::Spatial(vs), ScaleEmbedding::Global(g)) =
            (spatial.get(k)?, global.get(k)?)
        else {
            unreachable!("modes requested above")
        };
        counts.push((k, vs.len(), tk));
        let mean_of = |tape: &GradTape<f64>, vars: &[Var]| -> Vec<f64> {
            let n = vars.len() as f64;
            let len = tape.value(vars[0]).numel();
            (0..len)
                .map(|i| vars.iter().map(|v| tape.value(*v).data()[i]).sum::<f64>() / n)
                .collect()
        };
        let projected = mean_of(&tape, vs);
        gap = gap.max(tape.value(*g).data().iter().zip(&projected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let raw = tape.pool_spatial_vectors(map)?;
        let raw_mean = mean_of(&tape, &raw);
        let raw_global = tape.global_pool(map)?;
        gap = gap.max(tape.value(raw_global).data().iter().zip(&raw_mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok((counts, gap))
}

/// A run small enough to pretrain in about a second: eight 16-frame videos,
/// the micro encoder, batch 4, four steps. Frames stay 32x32 so the last
/// block still normalizes over more than one position.
pub fn tiny_run_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        encoder: micro_encoder(),
        ..RunConfig::default()
    };
    cfg.dataset.num_videos = 8;
    cfg.dataset.frames_per_video = 16;
    cfg.trainer.batch = 4;
    cfg.trainer.steps = 4;
    cfg.trainer.checkpoint_every = 2;
    cfg.trainer.prefetch = false;
    cfg
}

fn max_param_gap(a: &Params<f32>, b: &Params<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, x), (_, y))| x.data().iter().zip(y.data()))
        .map(|(x, y)| f64::from((x - y).abs()))
        .fold(0.0, f64::max)
}

fn expected_block_shapes() -> Vec<[usize; 4]> {
    vec![
        [8, 32, 32, 8],
        [4, 16, 16, 16],
        [2, 8, 8, 32],
        [1, 4, 4, 64],
        [1, 2, 2, 128],
    ]
}

/// Fast checks of the loss, encoder, retrieval, training and checkpoint
/// invariants against independent oracles. Finishes in seconds.
pub fn selfcheck_suite() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    let gap = info_nce_oracle_gap(1000, 1)?;
    out.push(CheckOutcome::new(
        "info_nce matches similarity-matrix oracle",
        gap <= 1e-10,
        format!("max |diff| {gap:.2e} over 1000 instances"),
    ));

    let gaps = uniform_similarity_gaps(&[2, 4, 8])?;
    let worst = gaps.iter().map(|g| g.1).fold(0.0, f64::max);
    out.push(CheckOutcome::new(
        "uniform similarities give B ln B",
        worst <= 1e-6,
        format!("max |diff| {worst:.2e} for B in 2,4,8"),
    ));

    let gaps = weight_scaling_gaps(&[0.5, 2.0, 3.0])?;
    let worst = gaps.iter().map(|g| g.1).fold(0.0, f64::max);
    out.push(CheckOutcome::new(
        "loss is linear in the weights",
        worst <= 1e-12,
        format!("max |L(cw) - cL(w)| {worst:.2e}"),
    ));

    let mut cfg = tiny_run_config(3);
    cfg.loss.alphas.values_mut().for_each(|a| *a = 0.0);
    cfg.loss.betas.values_mut().for_each(|b| *b = 0.0);
    let videos = generate_videos(&cfg.dataset, cfg.seed)?;
    let init: Params<f32> =
        init_params(&cfg.encoder, derive_seed(&[cfg.seed, stream::INIT]))?;
    let run = pretrain(&cfg, &videos, &TrainOutputs::default(), None)?;
    let moved = max_param_gap(&init, &run.params);
    out.push(CheckOutcome::new(
        "all-zero weights leave parameters unchanged",
        moved == 0.0 && run.log.iter().all(|r| r.losses.total == 0.0),
        format!("max parameter change {moved:.2e}"),
    ));

    let (counts, gap) = pooling_law(&EncoderConfig::default(), [8, 32, 32], 4)?;
    let counts_ok = counts == [(3, 2, 2), (4, 1, 1), (5, 1, 1)];
    out.push(CheckOutcome::new(
        "spatial pools average to the global pool",
        counts_ok && gap <= 1e-6,
        format!("vectors per scale {counts:?}, max gap {gap:.2e}"),
    ));

    let shapes = EncoderConfig::default().block_shapes([8, 32, 32])?;
    out.push(CheckOutcome::new(
        "toy encoder block shapes",
        shapes == expected_block_shapes(),
        format!("{shapes:?}"),
    ));

    let (report, oracle) = retrieval_against_oracle(7, 20)?;
    let worst = report
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    out.push(CheckOutcome::new(
        "retrieval matches exhaustive ranking",
        worst == 0.0,
        format!("report {report:?} oracle {oracle:?}"),
    ));

    let cfg = tiny_run_config(11);
    let videos = generate_videos(&cfg.dataset, cfg.seed)?;
    let a = pretrain(&cfg, &videos, &TrainOutputs::default(), None)?;
    let b = pretrain(&cfg, &videos, &TrainOutputs::default(), None)?;
    let same = a.params == b.params && a.log == b.log;
    out.push(CheckOutcome::new(
        "same seed gives identical runs",
        same,
        format!("final loss {:.6}", a.log.last().map_or(0.0, |r| r.losses.total)),
    ));

    let mut half = cfg.clone();
    half.trainer.steps = 2;
    let first = pretrain(&half, &videos, &TrainOutputs::default(), None)?;
    let bytes = encode_checkpoint(&Checkpoint {
        params: first.params,
        state: first.state,
    });
    let restored: Checkpoint<f32> = decode_checkpoint(&bytes, Path::new("<memory>"))?;
    let rest = pretrain(&cfg, &videos, &TrainOutputs::default(), Some(restored))?;
    let resumed = rest.params == a.params && rest.log[..] == a.log[2..];
    out.push(CheckOutcome::new(
        "resume from step 2 reproduces the full run",
        resumed,
        format!("max parameter gap {:.2e}", max_param_gap(&rest.params, &a.params)),
    ));

    let ckpt = Checkpoint {
        params: a.params.clone(),
        state: a.state.clone(),
    };
    let back: Checkpoint<f32> =
        decode_checkpoint(&encode_checkpoint(&ckpt), Path::new("<memory>"))?;
    out.push(CheckOutcome::new(
        "checkpoint round trip is exact",
        back == ckpt,
        format!("{} tensors, step {}", back.params.len(), back.state.step),
    ));

    Ok(out)
}

/// Retrieval accuracies from [`nn_retrieval`] and from [`retrieval_oracle`]
/// on a random gallery of `gallery_len >= 5` embeddings, five of which
/// duplicate others under a different label so ties are exercised.
pub fn retrieval_against_oracle(seed: u64, gallery_len: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = rng_from(&[seed, 41]);
    let ks = [1, 2, 5, 10];
    let mut make = |n: usize, base: u32| -> Vec<(Vec<f64>, u32, u32)> {
        (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (v, base + i as u32, rng.gen_range(0..4))
            })
            .collect()
    };
    let queries = make(20, 1000);
    let mut gallery = make(gallery_len - 5, 0);
    for i in 0..5 {
        let mut dup = gallery[i].clone();
        dup.1 = 500 + i as u32;
        dup.2 = (dup.2 + 1) % 4;
        gallery.push(dup);
    }
    let records = |rows: &[(Vec<f64>, u32, u32)]| -> Vec<EmbeddingRecord> {
        rows.iter()
            .map(|(v, id, label)| EmbeddingRecord {
                vector: v.iter().map(|x| *x as f32).collect(),
                video_id: *id,
                label: *label,
            })
            .collect()
    };
    // Compare against f32-rounded vectors, which is what the records hold.
    let rounded = |rows: &[(Vec<f64>, u32, u32)]| -> Vec<(Vec<f64>, u32, u32)> {
        rows.iter()
            .map(|(v, id, l)| (v.iter().map(|x| f64::from(*x as f32)).collect(), *id, *l))
            .collect()
    };
    let report = nn_retrieval(&records(&queries), &records(&gallery), &ks)?;
    let oracle = retrieval_oracle(&rounded(&queries), &rounded(&gallery), &ks);
    Ok((report.accuracy, oracle))
}
