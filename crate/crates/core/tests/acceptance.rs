//! Acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so every criterion reports even when an
//! earlier one fails. Criterion 7 trains a small end-to-end system and takes
//! several minutes.
//!
//! `ACCEPTANCE_ONLY=n` runs a single criterion; `ACCEPTANCE_STRICT=1` makes
//! any failure exit non-zero.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use image::RgbImage;
use ndarray::{s, Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use structcount::backbone::BackboneSpec;
use structcount::dataset::{Split, TileSource};
use structcount::grid::{count_cells, count_tile, CellGrid};
use structcount::heads::pooling::{ccpp_attention, ccpp_attention_backward, global_average, gwap, gwap_backward};
use structcount::heads::{
    extract_samples, fit_model, predict_samples, CountKind, CountModel, CountSample, CounterTrainConfig, SsNetRef,
};
use structcount::metrics::{evaluate, Scored};
use structcount::nn::output_size;
use structcount::ssnet::{
    extract_patches, false_positive_rate, mining_candidates, MiningCandidate, PatchLabelRule, SsNet, SsNetConfig,
    SsNetTrainConfig, SsNetTrainer, CONTEXT_PX, WINDOW_PX,
};
use structcount::synthgen::{generate_corpus, CorpusSpec, SplitPolicy, SyntheticSource};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn noise(w: u32, h: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]))
}

fn random_volume(rng: &mut ChaCha8Rng) -> Array3<f64> {
    let dims = (rng.random_range(1..=16), rng.random_range(1..=12), rng.random_range(1..=12));
    Array3::from_shape_fn(dims, |_| rng.random_range(-3.0..3.0))
}

fn gwap_equals_gap() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    for _ in 0..100 {
        let vol = random_volume(&mut rng);
        let (c, h, w) = vol.dim();
        let ones = Array2::<f64>::ones((h, w));
        let got = gwap(vol.view(), ones.view()).map_err(|e| e.to_string())?;
        let gap = global_average(vol.view());
        for ch in 0..c {
            // plain loop mean as the independent reference
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    acc += vol[[ch, y, x]];
                }
            }
            let naive = acc / (h * w) as f64;
            worst = worst.max((got[ch] - naive).abs()).max((got[ch] - gap[ch]).abs());
        }
    }
    check(worst <= 1e-6, format!("100 volumes, max |gwap - gap| = {worst:.2e}"))
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn pooling_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eps = 1e-5;
    let mut worst = 0f64;
    for _ in 0..20 {
        let vol = random_volume(&mut rng);
        let (c, h, w) = vol.dim();
        let prob = Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0));
        let weight = Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
        let bias: f64 = rng.random_range(-1.0..1.0);
        let g1 = Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
        let g2 = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0));

        // scalar losses L = <g, f(...)>
        let l_gwap = |v: &Array3<f64>, p: &Array2<f64>| (gwap(v.view(), p.view()).unwrap() * &g1).sum();
        let l_ccpp = |v: &Array3<f64>, p: &Array2<f64>, wt: &Array1<f64>, b: f64| {
            (ccpp_attention(v.view(), p.view(), wt.view(), b).unwrap() * &g2).sum()
        };
        let (dv1, dp1) = gwap_backward(vol.view(), prob.view(), g1.view()).map_err(|e| e.to_string())?;
        let (dv2, dp2, dw2, db2) =
            ccpp_attention_backward(vol.view(), prob.view(), weight.view(), g2.view()).map_err(|e| e.to_string())?;

        for (idx, _) in vol.indexed_iter() {
            let (mut up, mut down) = (vol.clone(), vol.clone());
            up[idx] += eps;
            down[idx] -= eps;
            let n1 = (l_gwap(&up, &prob) - l_gwap(&down, &prob)) / (2.0 * eps);
            let n2 = (l_ccpp(&up, &prob, &weight, bias) - l_ccpp(&down, &prob, &weight, bias)) / (2.0 * eps);
            worst = worst.max(rel_err(dv1[idx], n1)).max(rel_err(dv2[idx], n2));
        }
        for (idx, _) in prob.indexed_iter() {
            let (mut up, mut down) = (prob.clone(), prob.clone());
            up[idx] += eps;
            down[idx] -= eps;
            let n1 = (l_gwap(&vol, &up) - l_gwap(&vol, &down)) / (2.0 * eps);
            let n2 = (l_ccpp(&vol, &up, &weight, bias) - l_ccpp(&vol, &down, &weight, bias)) / (2.0 * eps);
            worst = worst.max(rel_err(dp1[idx], n1)).max(rel_err(dp2[idx], n2));
        }
        for k in 0..c {
            let (mut up, mut down) = (weight.clone(), weight.clone());
            up[k] += eps;
            down[k] -= eps;
            let n = (l_ccpp(&vol, &prob, &up, bias) - l_ccpp(&vol, &prob, &down, bias)) / (2.0 * eps);
            worst = worst.max(rel_err(dw2[k], n));
        }
        let n = (l_ccpp(&vol, &prob, &weight, bias + eps) - l_ccpp(&vol, &prob, &weight, bias - eps)) / (2.0 * eps);
        worst = worst.max(rel_err(db2, n));
    }
    check(worst < 1e-4, format!("20 instances, max relative error {worst:.2e}"))
}

fn fcn_patch_equivalence() -> Outcome {
    let net = SsNet::<f32>::new(SsNetConfig::default(), 3).map_err(|e| e.to_string())?;
    let img = noise(96, 96, 4);
    let native = net.native_probabilities(&img).map_err(|e| e.to_string())?;
    let (gh, gw, _) = native.dim();
    let padded = net.prepare(&img);
    let mut worst = 0f32;
    for i in 0..gh {
        for j in 0..gw {
            // the 64×64 crop at stride 8 with its context border
            let (y, x) = (8 * i, 8 * j);
            let win = padded.slice(s![.., .., y..y + WINDOW_PX, x..x + WINDOW_PX]).to_owned();
            let scores = net.scores(&win).map_err(|e| e.to_string())?;
            let (a, b) = (scores[[0, 0, 0, 0]], scores[[0, 1, 0, 0]]);
            let built = 1.0 / (1.0 + (a - b).exp());
            worst = worst.max((built - native[[i, j, 1]]).abs());
        }
    }
    check(
        worst < 1e-4,
        format!("{} positions on 96×96 (grid {gh}×{gw}), max |diff| = {worst:.2e}", gh * gw),
    )
}

fn size_equation() -> Outcome {
    let net = SsNet::<f32>::new(SsNetConfig::slim([4, 6, 8], 8), 5).map_err(|e| e.to_string())?;
    // conv 3×3 valid ×2, pool, ×2, pool, ×3, pool, head conv 8×8, conv 1×1
    let ops: [(usize, usize, usize); 12] = [
        (3, 0, 1),
        (3, 0, 1),
        (2, 0, 2),
        (3, 0, 1),
        (3, 0, 1),
        (2, 0, 2),
        (3, 0, 1),
        (3, 0, 1),
        (3, 0, 1),
        (2, 0, 2),
        (8, 0, 1),
        (1, 0, 1),
    ];
    let mut n = 224 + 2 * CONTEXT_PX;
    for &(k, p, st) in &ops {
        n = output_size(n, p, k, st).map_err(|e| e.to_string())?;
    }
    let plan = net.layer_plan(224, 224).map_err(|e| e.to_string())?;
    let img = noise(224, 224, 6);
    let mut traced = Vec::new();
    let out = net.scores_traced(&net.prepare(&img), |_, shape| traced.push(shape)).map_err(|e| e.to_string())?;
    let last = *plan.last().unwrap();
    check(
        n == 21 && last == (2, 21, 21) && traced == plan && out.dim() == (1, 2, 21, 21),
        format!(
            "224 -> {n}×{n}×{}, plan {} layers, runtime shapes match: {}",
            last.0,
            plan.len(),
            traced == plan
        ),
    )
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0f64;
    let mut exact = true;
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let items: Vec<Scored> = (0..n)
            .map(|i| Scored::new(i.to_string(), rng.random_range(0..100), rng.random_range(-5.0..110.0)))
            .collect();
        let r = evaluate(&items).map_err(|e| e.to_string())?;
        let mut tae = [0f64; 3];
        for s in &items {
            let band = if s.truth <= 30 {
                0
            } else if s.truth <= 60 {
                1
            } else {
                2
            };
            tae[band] += (s.prediction - f64::from(s.truth)).abs();
        }
        let total: f64 = tae.iter().sum();
        worst = worst
            .max((r.tae_low - tae[0]).abs())
            .max((r.tae_medium - tae[1]).abs())
            .max((r.tae_high - tae[2]).abs())
            .max((r.tae_total - total).abs())
            .max((r.mae - total / n as f64).abs());
        exact &= r.tae_low + r.tae_medium + r.tae_high == r.tae_total;
        exact &= r.mae == r.tae_total / n as f64;
    }
    check(
        worst < 1e-9 && exact,
        format!("1000 instances, max |diff| = {worst:.2e}, exact partition and mean: {exact}"),
    )
}

fn grid_protocol() -> Outcome {
    let img = noise(3024, 1008, 8);
    let bb = BackboneSpec::TinyCnn { seed: 0 }.build().map_err(|e| e.to_string())?;
    let mut model = CountModel::new(CountKind::Drc, bb, None, 9).map_err(|e| e.to_string())?;
    model.heads.set_output_bias(17.6);
    let grid = count_tile(&model, &img, 336, 0, Some(0.3)).map_err(|e| e.to_string())?;
    let sum: u64 = grid.cells.iter().map(|c| u64::from(c.pred)).sum();
    // a counter with known per-cell output
    let stamped = count_cells(&img, 336, 2, |crop| {
        let p = crop.get_pixel(0, 0).0;
        Ok(structcount::heads::Prediction::new(f64::from(p[0] % 50)))
    })
    .map_err(|e| e.to_string())?;
    let expected: u64 = (0..27)
        .map(|k| u64::from(img.get_pixel(336 * (k % 9) as u32, 336 * (k / 9) as u32).0[0] % 50))
        .sum();
    check(
        grid.cells.len() == 27
            && (grid.rows, grid.cols) == (3, 9)
            && grid.predicted_total() == sum
            && stamped.predicted_total() == expected,
        format!(
            "{} cells ({}×{}), total {} = Σ cells {sum}; stamped total {} vs {expected}",
            grid.cells.len(),
            grid.rows,
            grid.cols,
            grid.predicted_total(),
            stamped.predicted_total()
        ),
    )
}

fn train_segmenter(seed: u64, scenes: usize, epochs: usize) -> structcount::Result<SsNet<f32>> {
    let src = SyntheticSource::new(CorpusSpec::new(scenes, (0, 80), seed), None)?;
    let (mut patches, mut cands) = (Vec::new(), Vec::new());
    for i in 0..src.len() {
        let tile = src.tile(i)?;
        patches.extend(extract_patches(&tile, 32, PatchLabelRule::default())?);
        cands.extend(mining_candidates(&tile, 128, 64)?);
    }
    let net = SsNet::<f32>::new(SsNetConfig::slim([8, 16, 32], 32), seed)?;
    let cfg = SsNetTrainConfig {
        epochs,
        lr: 1e-3,
        augment: false,
        mining_interval: 3,
        seed,
        ..Default::default()
    };
    let mut trainer = SsNetTrainer::new(net, &patches, &cands, cfg)?;
    for _ in 0..epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_parts().0)
}

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let run = || -> structcount::Result<Vec<f64>> {
        let net = Arc::new(train_segmenter(99, 30, 6)?);
        let mut spec = CorpusSpec::new(2400, (0, 80), 2024);
        spec.split = SplitPolicy::Fixed { train: 2000, val: 200 };
        let source = |split| SyntheticSource::new(spec.clone(), Some(split));
        let bb = BackboneSpec::TinyCnn { seed: 0 }.build()?;
        let fusion = CountModel::new(CountKind::Fusion, bb.clone(), Some(net.clone()), 1)?;
        let train = extract_samples(&fusion, &source(Split::Train)?, false)?;
        let val = extract_samples(&fusion, &source(Split::Val)?, false)?;
        let test = extract_samples(&fusion, &source(Split::Test)?, false)?;
        let mut mae = Vec::new();
        for kind in [CountKind::Drc, CountKind::Gwap, CountKind::Fusion] {
            let seg = (kind != CountKind::Drc).then(|| net.clone());
            let mut model = CountModel::new(kind, bb.clone(), seg, 1)?;
            let strip = |v: &[CountSample]| -> Vec<CountSample> {
                v.iter()
                    .cloned()
                    .map(|mut s| {
                        if kind == CountKind::Drc {
                            s.features.weighted = None;
                        }
                        s
                    })
                    .collect()
            };
            let cfg = CounterTrainConfig { epochs: 60, ..Default::default() };
            fit_model(&mut model, &strip(&train), &strip(&val), &cfg)?;
            let test_k = strip(&test);
            let pred = predict_samples(&model.heads, &test_k, 64)?;
            let items: Vec<Scored> =
                test_k.iter().zip(&pred).map(|(s, &p)| Scored::new(&s.id, s.count as u32, p)).collect();
            mae.push(evaluate(&items)?.mae);
        }
        Ok(mae)
    };
    let mae = run().map_err(|e| e.to_string())?;
    let (drc, gwap_mae, fusion) = (mae[0], mae[1], mae[2]);
    check(
        fusion <= 8.0 && fusion <= gwap_mae && fusion <= drc,
        format!(
            "test MAE fusion {fusion:.3}, gwap {gwap_mae:.3}, drc {drc:.3} ({:.0} s)",
            started.elapsed().as_secs_f64()
        ),
    )
}

fn mining_loop() -> Outcome {
    let run = || -> structcount::Result<(usize, Vec<usize>, bool, f64, f64, usize, usize, usize)> {
        // dense scenes for patches bias the net towards "built"; clean
        // ground to mine comes from sparse scenes
        let dense = SyntheticSource::new(CorpusSpec::new(6, (50, 80), 31), None)?;
        let sparse = SyntheticSource::new(CorpusSpec::new(24, (2, 12), 32), None)?;
        let mut patches = Vec::new();
        for i in 0..dense.len() {
            patches.extend(extract_patches(&dense.tile(i)?, 64, PatchLabelRule::default())?);
        }
        let (mut cands, mut held_out): (Vec<MiningCandidate>, Vec<MiningCandidate>) = (Vec::new(), Vec::new());
        for i in 0..sparse.len() {
            let crops = mining_candidates(&sparse.tile(i)?, 96, 48)?;
            if i < 12 {
                cands.extend(crops);
            } else {
                held_out.extend(crops);
            }
        }
        let net = SsNet::<f32>::new(SsNetConfig::slim([4, 6, 8], 8), 33)?;
        let cfg = SsNetTrainConfig { lr: 1e-3, augment: false, seed: 34, ..Default::default() };
        let (epochs, threshold) = (cfg.epochs, cfg.mining_threshold);
        let mut trainer = SsNetTrainer::new(net, &patches, &cands, cfg)?;
        let mut fp_before = f64::NAN;
        for epoch in 1..=epochs {
            if epoch == epochs {
                fp_before = false_positive_rate(&trainer.net, &held_out, threshold)?;
            }
            trainer.run_epoch()?;
        }
        let fp_after = false_positive_rate(&trainer.net, &held_out, threshold)?;
        let (_, history, state) = trainer.into_parts();
        let mined_at: Vec<usize> = history.iter().filter(|s| s.mined.is_some()).map(|s| s.epoch).collect();
        let pools: Vec<usize> = history.iter().map(|s| s.pool_size).collect();
        let monotone = pools.windows(2).all(|w| w[0] <= w[1]);
        let last_round = history.last().and_then(|s| s.mined).unwrap_or(0);
        Ok((
            state.rounds,
            mined_at,
            monotone,
            fp_before,
            fp_after,
            state.negative_pool.len(),
            last_round,
            held_out.len(),
        ))
    };
    let (rounds, mined_at, monotone, before, after, pool, last_round, held) = run().map_err(|e| e.to_string())?;
    check(
        rounds == 3 && mined_at == [15, 30, 45] && monotone && after <= before,
        format!(
            "{rounds} rounds at epochs {mined_at:?}, pool non-decreasing {monotone} (final {pool}, {last_round} added in the last round), held-out FP rate {before:.3} -> {after:.3} over {held} crops"
        ),
    )
}

fn files_equal(a: &Path, b: &Path) -> std::io::Result<bool> {
    let mut names: Vec<_> = walk(a)?;
    names.sort();
    for rel in &names {
        if std::fs::read(a.join(rel))? != std::fs::read(b.join(rel))? {
            return Ok(false);
        }
    }
    let mut other = walk(b)?;
    other.sort();
    Ok(names == other)
}

fn walk(root: &Path) -> std::io::Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    Ok(out)
}

fn determinism_and_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let run = || -> structcount::Result<(bool, f32, f64, bool)> {
        let spec = CorpusSpec::new(8, (0, 80), 77);
        let manifest_a = generate_corpus(&spec, d.join("a"))?;
        let manifest_b = generate_corpus(&spec, d.join("b"))?;
        let identical = files_equal(&d.join("a"), &d.join("b")).unwrap_or(false)
            && manifest_a.entries.len() == manifest_b.entries.len();

        let seg = SsNet::<f32>::new(SsNetConfig::slim([4, 6, 8], 8), 40)?;
        let seg_path = d.join("seg.ckpt");
        seg.save(&seg_path)?;
        let seg_back = SsNet::<f32>::load(&seg_path)?;
        let img = noise(336, 336, 41);
        let (m1, m2) = (seg.segment_rgb(&img)?, seg_back.segment_rgb(&img)?);
        let seg_diff = m1.values.iter().zip(&m2.values).fold(0f32, |a, (x, y)| a.max((x - y).abs()));

        let bb = BackboneSpec::TinyCnn { seed: 0 }.build()?;
        let mut model = CountModel::new(CountKind::Fusion, bb, Some(Arc::new(seg_back)), 42)?;
        model.ssnet_ref = Some(SsNetRef::of_file(&seg_path)?);
        model.heads.set_output_bias(23.5);
        let model_path = d.join("fusion.ckpt");
        model.save(&model_path)?;
        let back = CountModel::load(&model_path)?;
        let mut count_diff = 0f64;
        for k in 0..3 {
            let tile = spec.scene(k)?;
            count_diff = count_diff.max((model.predict(&tile)?.raw - back.predict(&tile)?.raw).abs());
        }

        let mut grid = count_cells(&noise(1000, 700, 43), 336, 1, |crop| {
            Ok(structcount::heads::Prediction::new(f64::from(crop.get_pixel(5, 5).0[1])))
        })?;
        grid.set_truths(|c| Some((c.row * 10 + c.col) as u32));
        let table = d.join("cells.tsv");
        grid.write_tsv(&table)?;
        let read = CellGrid::read_tsv(&table)?;
        let cells_exact = read == grid && read.to_tsv() == std::fs::read_to_string(&table).unwrap_or_default();
        Ok((identical, seg_diff, count_diff, cells_exact))
    };
    let (identical, seg_diff, count_diff, cells_exact) = run().map_err(|e| e.to_string())?;
    check(
        identical && seg_diff <= 1e-6 && count_diff <= 1e-6 && cells_exact,
        format!(
            "corpus byte-identical {identical}; reload diff ssnet {seg_diff:.1e}, counter {count_diff:.1e}; cell table exact {cells_exact}"
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gwap equals global average pooling under a unit map", gwap_equals_gap),
        ("pooling gradients match finite differences", pooling_gradients),
        ("fully convolutional map equals per-patch passes", fcn_patch_equivalence),
        ("size equation predicts every layer shape", size_equation),
        ("metrics agree with a naive oracle", metrics_oracle),
        ("grid protocol on a 1008x3024 tile", grid_protocol),
        ("synthetic end-to-end counting", end_to_end),
        ("hard-negative mining loop", mining_loop),
        ("determinism and round trips", determinism_and_round_trips),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let (mut failed, mut ran) = (0, 0);
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    println!("{} of {} criteria passed", ran - failed, ran);
    // failures are reported, not fatal, unless a strict run is requested
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
