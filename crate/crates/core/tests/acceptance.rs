//! Acceptance suite: one check per criterion, each printing a single PASS or
//! FAIL line. Runs without the libtest harness so the lines always appear.

// `ensure!` negates whole comparisons on purpose: NaN must fail a check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::grad_cases::{self, MAX_REL, TYPICAL_REL};
use common::*;
use dfc_dit::baselines::{self, DownscaleKind, DownscaleMethod, Filter};
use dfc_dit::imageio::{self, LdrImage};
use dfc_dit::ops;
use dfc_dit::pipelines::{self, Corpus, TaskConfig, TrainReport};
use dfc_dit::synthetic;
use dfc_dit::{LossArch, LossNetwork, NetShape, Shape, Tap, Task, Tensor, TransformNet, WeightArchive};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Desk-scale training fixture shared by the downscaling, decolorization and
/// determinism criteria.
const CORPUS_SIZE: usize = 20;
const IMAGE_SIZE: usize = 64;
const CORPUS_SEED: u64 = 7;
const LOSSNET: LossArch = LossArch::Vgg19 { width_divisor: 4 };
const LOSSNET_SEED: u64 = 1;
const FIXTURE_LR: f32 = 0.002;
const FIXTURE_BATCH: usize = 4;
const FIXTURE_EPOCHS: usize = 40;

fn fixture_corpus() -> Corpus {
    Corpus::new(synthetic::textured_corpus(CORPUS_SIZE, IMAGE_SIZE, CORPUS_SEED)).unwrap()
}

fn fixture_lossnet() -> LossNetwork {
    LossNetwork::random(LOSSNET, LOSSNET_SEED)
}

fn fixture_config(task: Task) -> TaskConfig {
    TaskConfig {
        learning_rate: FIXTURE_LR,
        batch_size: FIXTURE_BATCH,
        epochs: FIXTURE_EPOCHS,
        training_size: IMAGE_SIZE,
        ..TaskConfig::for_task(task)
    }
}

fn train_fixture_downscaler() -> (TransformNet, TrainReport) {
    pipelines::train_downscaler(&fixture_corpus(), &fixture_lossnet(), &fixture_config(Task::Downscale)).unwrap()
}

fn serial<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn criterion_1() -> Outcome {
    // unit-scale weights keep the loss O(1), where an absolute tolerance is meaningful
    let mut archive = LossNetwork::random(LossArch::Tiny { width: 4 }, 101).to_archive();
    for t in &mut archive.tensors {
        t.data.iter_mut().for_each(|v| *v /= 128.0);
    }
    let net = LossNetwork::from_archive(&archive).unwrap();
    let taps = Tap::parse_set("conv1_1,conv2_1").unwrap();
    let mut rng = Lcg::new(102);
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut largest = 0.0f64;
    for _ in 0..100 {
        let x = rng.tensor(Shape::new(1, 3, 8, 8), 0.0, 255.0);
        let y = rng.tensor(Shape::new(1, 3, 8, 8), 0.0, 255.0);
        let fast = net.perceptual_loss(&x, &y, &taps).unwrap() as f64;
        let slow = tiny_perceptual_loss(&net, &x, &y);
        worst = worst.max((fast - slow).abs());
        largest = largest.max(slow);
    }
    let elapsed = start.elapsed();
    ensure!(worst <= 1e-5, "max |loss - oracle| = {worst:.3e} > 1e-5");
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("100 cases, max abs diff {worst:.2e} (losses up to {largest:.3}), {:.2}s", elapsed.as_secs_f64()))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let results = grad_cases::all();
    let elapsed = start.elapsed();
    let worst = results.iter().max_by(|a, b| a.1.max_rel.total_cmp(&b.1.max_rel)).unwrap();
    for (name, c) in &results {
        ensure!(c.max_rel < MAX_REL, "{name}: max relative error {:.3e}", c.max_rel);
        ensure!(c.mean_rel < TYPICAL_REL, "{name}: mean relative error {:.3e}", c.mean_rel);
    }
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "{} checks, worst max rel {:.2e} ({}), {:.2}s",
        results.len(),
        worst.1.max_rel,
        worst.0,
        elapsed.as_secs_f64()
    ))
}

fn criterion_3() -> Outcome {
    let mut rng = Lcg::new(301);
    let shape = NetShape::default();
    let down = TransformNet::build(Task::Downscale, shape, 1).unwrap();
    let y = down.forward(&rng.tensor(Shape::new(1, 3, 256, 256), 0.0, 255.0)).unwrap();
    ensure!(y.shape() == Shape::new(1, 3, 64, 64), "downscaler produced {}", y.shape());

    let decol = TransformNet::build(Task::Decolorize, shape, 2).unwrap();
    let y = decol.forward(&rng.tensor(Shape::new(1, 3, 100, 77), 0.0, 255.0)).unwrap();
    ensure!(y.shape() == Shape::new(1, 1, 100, 77), "decolorizer produced {}", y.shape());

    let tone = TransformNet::build(Task::Tonemap, shape, 3).unwrap();
    let wide = Tensor::from_fn(Shape::new(1, 3, 40, 40), |_, c, y, x| {
        let e = -5.0 + 10.0 * ((y * 40 + x) as f32 / 1599.0);
        10f32.powf(e) * (1.0 + c as f32)
    });
    ensure!(wide.max() / wide.min() >= 1e10, "input spans only {:e}", wide.max() / wide.min());
    let mut extremes = (f32::INFINITY, f32::NEG_INFINITY);
    for input in [wide.clone(), wide.map(|v| -v)] {
        let y = tone.forward(&input).unwrap();
        ensure!(y.shape() == Shape::new(1, 3, 40, 40), "tonemapper produced {}", y.shape());
        ensure!(y.min() >= 0.0 && y.max() <= 255.0, "tonemapper range [{}, {}]", y.min(), y.max());
        extremes = (extremes.0.min(y.min()), extremes.1.max(y.max()));
    }
    Ok(format!(
        "256x256 -> 64x64, 100x77 -> 1x100x77, tonemap range [{:.3}, {:.3}] over 10 decades",
        extremes.0, extremes.1
    ))
}

fn criterion_4() -> Outcome {
    let mut rng = Lcg::new(401);
    for (n, c, h, w) in [(1, 3, 5, 7), (2, 3, 16, 16), (1, 1, 1, 1), (3, 2, 4, 9)] {
        let x = rng.tensor(Shape::new(n, c, h, w), -300.0, 300.0);
        let up = ops::upsample_nearest(&x, 4).unwrap();
        ensure!(up.shape() == Shape::new(n, c, 4 * h, 4 * w), "upsample shape {}", up.shape());
        for b in 0..n {
            for ch in 0..c {
                for y in 0..4 * h {
                    for xx in 0..4 * w {
                        let v = up.at(b, ch, y, xx).to_bits();
                        ensure!(v == up.at(b, ch, y / 4 * 4, xx / 4 * 4).to_bits(), "block not constant at ({y},{xx})");
                        if y % 4 == 0 && xx % 4 == 0 {
                            ensure!(v == x.at(b, ch, y / 4, xx / 4).to_bits(), "top-left recovery failed");
                        }
                    }
                }
            }
        }
        let gray = rng.tensor(Shape::new(n, 1, h, w), -300.0, 300.0);
        let rgb = pipelines::replicate3(&gray).unwrap();
        ensure!(rgb.shape() == Shape::new(n, 3, h, w), "replicate3 shape {}", rgb.shape());
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let v = gray.at(b, 0, y, xx).to_bits();
                    for ch in 0..3 {
                        ensure!(rgb.at(b, ch, y, xx).to_bits() == v, "replicate3 channel {ch} differs");
                    }
                }
            }
        }
    }
    Ok("block constancy, top-left recovery and channel replication exact on 4 shapes".into())
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let corpus = fixture_corpus();
    let lossnet = fixture_lossnet();
    let config = fixture_config(Task::Downscale);
    let before = lossnet.checksum();
    let (net, report) = pipelines::train_downscaler(&corpus, &lossnet, &config).unwrap();
    let elapsed = start.elapsed();
    ensure!(report.iterations() == 200, "ran {} iterations", report.iterations());
    ensure!(lossnet.checksum() == before, "loss network changed during training");
    ensure!(report.losses.iter().all(|l| l.is_finite()), "non-finite loss in trace");

    let all = Tensor::stack(corpus.images()).unwrap();
    let init = TransformNet::build(Task::Downscale, config.net_shape(), config.seed).unwrap();
    let initial = pipelines::evaluate_loss(&init, &lossnet, &all, &config.taps).unwrap();
    let trained = pipelines::evaluate_loss(&net, &lossnet, &all, &config.taps).unwrap();
    let bicubic =
        baselines::downscale_tensor(&all, DownscaleMethod::new(DownscaleKind::Filtered(Filter::Bicubic), 4).unwrap())
            .unwrap();
    let bicubic = lossnet.perceptual_loss(&all, &ops::upsample_nearest(&bicubic, 4).unwrap(), &config.taps).unwrap();
    ensure!(trained <= 0.5 * initial, "final loss {trained} > half of initial {initial}");
    ensure!(trained < bicubic, "trained loss {trained} is not below bicubic {bicubic}");
    ensure!(elapsed < Duration::from_secs(15 * 60), "took {elapsed:?}");
    Ok(format!(
        "corpus loss {initial:.1} -> {trained:.1} (x{:.3}), bicubic {bicubic:.1}, {:.1}s",
        trained / initial,
        elapsed.as_secs_f64()
    ))
}

/// Two flat regions of colours with equal Rec. 601 luminance, found by
/// solving 299 R + 587 G + 114 B = const over integers.
fn iso_luminant_probe() -> (LdrImage, [u8; 3], [u8; 3]) {
    let magenta = [252u8, 0, 235];
    let green = [0u8, 174, 0];
    let (w, h) = (32, 32);
    let mut data = Vec::with_capacity(w * h * 3);
    for _ in 0..h {
        for x in 0..w {
            data.extend_from_slice(if x < w / 2 { &magenta } else { &green });
        }
    }
    (LdrImage::new(w, h, 3, data).unwrap(), magenta, green)
}

/// Mean gray level of a region's interior, away from the boundary the
/// convolutions blur across.
fn region_mean(img: &LdrImage, xs: std::ops::Range<usize>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for y in 4..img.height - 4 {
        for x in xs.clone() {
            sum += img.pixel(x, y)[0] as f64;
            count += 1;
        }
    }
    sum / count as f64
}

fn criterion_6() -> Outcome {
    let (probe, a, b) = iso_luminant_probe();
    ensure!(imageio::luminance_u8(a) == imageio::luminance_u8(b), "probe colours are not iso-luminant");
    let baseline = baselines::decolorize_baseline(&probe).unwrap();
    let base_diff = region_mean(&baseline, 4..12) - region_mean(&baseline, 20..28);
    ensure!(baseline.data.iter().all(|&v| v == baseline.data[0]), "luminance baseline shows contrast");

    let config = fixture_config(Task::Decolorize);
    ensure!(Tap::format_set(&config.taps) == "conv4_1", "taps {}", Tap::format_set(&config.taps));
    let (net, report) = pipelines::train_decolorizer(&fixture_corpus(), &fixture_lossnet(), &config).unwrap();
    let gray = pipelines::apply(&net, &probe).unwrap();
    ensure!(gray.channels == 1, "decolorizer wrote {} channels", gray.channels);
    let (left, right) = (region_mean(&gray, 4..12), region_mean(&gray, 20..28));
    let diff = (left - right).abs();
    ensure!(diff >= 2.0, "net gray levels {left:.2} vs {right:.2} differ by {diff:.2} < 2");
    ensure!(base_diff == 0.0, "baseline difference {base_diff}");
    Ok(format!(
        "net {left:.1} vs {right:.1} (diff {diff:.1} levels), baseline {} vs {} (diff 0), loss {:.1} -> {:.1}",
        baseline.data[0],
        baseline.data[baseline.data.len() - 1],
        report.losses[0],
        report.losses[report.losses.len() - 1]
    ))
}

fn criterion_7() -> Outcome {
    let hdr = synthetic::radiance_map(128, 4.5, 3);
    let dr = hdr.dynamic_range();
    ensure!(dr >= 1e4, "dynamic range {dr:e}");
    let config = TaskConfig { learning_rate: FIXTURE_LR, iterations: 200, ..TaskConfig::for_task(Task::Tonemap) };
    let start = Instant::now();
    let out = pipelines::tonemap_online(&hdr, &fixture_lossnet(), &config).unwrap();
    let elapsed = start.elapsed();
    let initial = out.report.losses[0];
    let final_loss = out.report.final_loss.unwrap();
    ensure!(final_loss < initial, "final loss {final_loss} not below initial {initial}");
    ensure!(out.net_output.min() >= 0.0 && out.net_output.max() <= 255.0, "net output outside [0, 255]");
    let img = &out.image;
    ensure!(
        (img.width, img.height, img.channels) == (128, 128, 3),
        "output {}x{}x{}",
        img.width,
        img.height,
        img.channels
    );

    let mut checked = 0;
    let mut worst = 0i32;
    for y in 0..128 {
        for x in 0..128 {
            let rgb = hdr.pixel(x, y);
            if rgb[0] != rgb[1] || rgb[1] != rgb[2] {
                continue;
            }
            let l_out = imageio::luminance_rgb([0, 1, 2].map(|c| out.net_output.at(0, c, y, x)));
            let expected = imageio::quantize(l_out) as i32;
            for &v in img.pixel(x, y) {
                worst = worst.max((v as i32 - expected).abs());
            }
            checked += 1;
        }
    }
    ensure!(checked > 0, "no achromatic pixels in the fixture");
    ensure!(worst <= 1, "achromatic pixel off by {worst} levels");
    ensure!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    Ok(format!(
        "DR {dr:.2e}, loss {initial:.1} -> {final_loss:.1}, {checked} achromatic pixels within {worst} level, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn criterion_8() -> Outcome {
    let (bytes, pixels) = mixed_rgbe_fixture();
    let ours = imageio::decode_hdr(&bytes).map_err(|e| e.to_string())?;
    let reference =
        image::load_from_memory_with_format(&bytes, image::ImageFormat::Hdr).map_err(|e| e.to_string())?.into_rgb32f();
    let mut worst_quanta = 0.0f64;
    for (i, (p, rgbe)) in reference.pixels().zip(&pixels).enumerate() {
        let quantum = 2f64.powi(rgbe[3] as i32 - 136);
        let ours = ours.pixel(i % ours.width, i / ours.width);
        for (&o, &r) in ours.iter().zip(&p.0) {
            let d = (o as f64 - r as f64).abs();
            if rgbe[3] == 0 {
                ensure!(d == 0.0, "zero-exponent pixel {i} decoded to {o}");
            } else {
                worst_quanta = worst_quanta.max(d / quantum);
            }
        }
    }
    ensure!(worst_quanta <= 1.0, "RGBE decode differs by {worst_quanta} quanta");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = Lcg::new(801);
    for (i, (w, h, c)) in [(1, 1, 1), (2, 2, 3), (37, 13, 3), (16, 9, 1)].into_iter().enumerate() {
        let img = LdrImage::new(w, h, c, (0..w * h * c).map(|_| rng.byte()).collect()).unwrap();
        let ext = if c == 3 { "ppm" } else { "pgm" };
        for name in [format!("img{i}.png"), format!("img{i}.{ext}")] {
            let path = dir.path().join(name);
            imageio::save_image(&img, &path).map_err(|e| e.to_string())?;
            let back = imageio::load_image(&path).map_err(|e| e.to_string())?;
            ensure!(back == img, "{} did not round-trip", path.display());
        }
    }

    let hdr = synthetic::radiance_map(24, 4.0, 5);
    for rle in [false, true] {
        let path = dir.path().join(format!("map{rle}.hdr"));
        imageio::save_hdr(&hdr, &path, rle).map_err(|e| e.to_string())?;
        let once = imageio::load_hdr(&path).map_err(|e| e.to_string())?;
        let again = imageio::decode_hdr(&imageio::encode_hdr(&once, rle)).map_err(|e| e.to_string())?;
        ensure!(once == again, "decoded HDR is not a fixed point of encode/decode");
    }

    let archives = [
        LossNetwork::random(LossArch::Vgg19 { width_divisor: 8 }, 9).to_archive(),
        TransformNet::build(Task::Tonemap, NetShape::default(), 4).unwrap().to_archive(),
    ];
    for (i, archive) in archives.iter().enumerate() {
        let path = dir.path().join(format!("w{i}.bin"));
        archive.save(&path).map_err(|e| e.to_string())?;
        let first = std::fs::read(&path).map_err(|e| e.to_string())?;
        let loaded = WeightArchive::load(&path).map_err(|e| e.to_string())?;
        let path2 = dir.path().join(format!("w{i}b.bin"));
        loaded.save(&path2).map_err(|e| e.to_string())?;
        ensure!(std::fs::read(&path2).map_err(|e| e.to_string())? == first, "archive {i} re-save differs");
        for (a, b) in archive.tensors.iter().zip(&loaded.tensors) {
            ensure!(
                a.name == b.name && a.data.iter().zip(&b.data).all(|(p, q)| p.to_bits() == q.to_bits()),
                "tensor {} changed",
                a.name
            );
        }
    }
    Ok(format!("RGBE within {worst_quanta:.2} quantum of the reference decoder, PNG/PPM/PGM and archives bitwise"))
}

fn criterion_9() -> Outcome {
    let mut rng = Lcg::new(901);
    for (w, h) in [(11, 11), (40, 23), (64, 64)] {
        let x = LdrImage::new(w, h, 1, (0..w * h).map(|_| rng.byte()).collect()).unwrap();
        let s = baselines::ssim(&x, &x).unwrap();
        ensure!(s == 1.0, "ssim(x, x) = {s}");
    }
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for case in ssim_cases() {
        let (w, h, a, b) = ssim_pair(case.index);
        let b: Vec<u8> = if case.inverted { a.iter().map(|v| 255 - v).collect() } else { b };
        let s = baselines::ssim(&LdrImage::new(w, h, 1, a).unwrap(), &LdrImage::new(w, h, 1, b).unwrap()).unwrap();
        worst = worst.max((s - case.ssim).abs());
        if case.inverted {
            ensure!(s < 0.0, "ssim against the negative is {s}");
        } else {
            pairs += 1;
        }
    }
    ensure!(pairs >= 20, "only {pairs} reference pairs");
    ensure!(worst < 1e-4, "max deviation from reference {worst:.3e}");
    Ok(format!("ssim(x,x) = 1 exactly; {pairs} pairs within {worst:.2e} of the reference"))
}

fn criterion_10() -> Outcome {
    let (_, a) = serial(train_fixture_downscaler);
    let (_, b) = serial(train_fixture_downscaler);
    ensure!(a.losses.len() == b.losses.len(), "trace lengths differ");
    let same = a.losses.iter().zip(&b.losses).all(|(x, y)| x.to_bits() == y.to_bits());
    ensure!(same, "loss traces differ");
    ensure!(a.net_checksum == b.net_checksum, "trained nets differ");
    Ok(format!("two serial runs: {} identical losses, net checksum {}", a.losses.len(), &a.net_checksum[..16]))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("oracle equivalence of the perceptual loss", criterion_1),
        ("finite-difference gradient suite", criterion_2),
        ("architecture contracts", criterion_3),
        ("shape-parity identities", criterion_4),
        ("desk-scale downscale training", criterion_5),
        ("iso-luminant contrast after decolorization training", criterion_6),
        ("online tone mapping end to end", criterion_7),
        ("format fidelity", criterion_8),
        ("metric sanity", criterion_9),
        ("determinism of serial training", criterion_10),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|k| k != n) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
