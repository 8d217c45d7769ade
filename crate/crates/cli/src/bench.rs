use std::path::Path;
use std::time::Instant;

use anyhow::{ensure, Result};
use elbnn_core::binarize::sign_forward;
use elbnn_core::binconv::binconv2d;
use elbnn_core::conv::{conv2d_forward, ConvSpec};
use elbnn_core::model::{Backend, Mode};
use elbnn_core::{Shape4, Tensor};

use crate::commands::build;
use crate::ConfigArgs;

/// Fixed pseudo-random input so the non-timing output is reproducible.
fn probe(shape: Shape4) -> Tensor<f32> {
    Tensor::from_fn(shape, |n, c, y, x| {
        let t = (n * 7919 + c * 104_729 + y * 131 + x * 17) as f32;
        (t * 0.618_034).sin()
    })
}

fn time_ms(mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// One warm-up call, then `runs` timed calls.
fn sample(runs: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    f()?;
    (0..runs).map(|_| time_ms(&mut f)).collect()
}

fn report(label: &str, times: &[f64]) -> f64 {
    if times.len() == 1 {
        println!("{label}: {:.3} ms", times[0]);
        return times[0];
    }
    let per: Vec<String> = times.iter().map(|t| format!("{t:.3}")).collect();
    println!("{label} runs (ms): {}", per.join(" "));
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let min = times.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "{label} mean {mean:.3} ms, min {min:.3} ms over {} runs",
        times.len()
    );
    mean
}

pub fn run(
    args: &ConfigArgs,
    runs: usize,
    batch: usize,
    checkpoint: Option<&Path>,
) -> Result<bool> {
    ensure!(runs > 0, "--runs must be at least 1");
    ensure!(batch > 0, "--batch must be at least 1");
    let cfg = args.resolve()?;
    let mut graph = build(&cfg)?;
    if let Some(p) = checkpoint {
        graph.load_checkpoint(p)?;
    }
    let x = probe(graph.input_shape(batch));
    println!(
        "arch {} input {} threads {}",
        cfg.arch.family,
        x.shape(),
        rayon::current_num_threads()
    );

    let packed_mode = Mode::eval().with_backend(Backend::Packed);
    let float_mode = Mode::eval().with_backend(Backend::Float);
    let packed_out = graph.forward(x.clone(), &packed_mode)?;
    let float_out = graph.forward(x.clone(), &float_mode)?;
    let diff = packed_out
        .data()
        .iter()
        .zip(float_out.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("max |packed - float| logit difference: {diff:.3e}");

    let packed = sample(runs, || {
        graph
            .forward(x.clone(), &packed_mode)
            .map(drop)
            .map_err(Into::into)
    })?;
    let float = sample(runs, || {
        graph
            .forward(x.clone(), &float_mode)
            .map(drop)
            .map_err(Into::into)
    })?;
    let p = report("packed forward", &packed);
    let f = report("float forward", &float);
    println!("forward speedup (float / packed): {:.2}x", f / p);

    // 1x1 convolution at 64 channels, the shape binarized layers are cheapest at
    let spec = ConvSpec::new(64, 64, 1, 1, 0);
    let a = probe(Shape4::new(batch, 64, 28, 28));
    let w = probe(spec.weight_shape());
    let (ab, wb) = (sign_forward(&a), sign_forward(&w));
    let (asign, wsign) = (
        a.map(|v| if v >= 0.0 { 1.0 } else { -1.0 }),
        w.map(|v| if v >= 0.0 { 1.0 } else { -1.0 }),
    );
    let packed = sample(runs, || {
        binconv2d::<f32>(&ab, &wb, &spec)
            .map(drop)
            .map_err(Into::into)
    })?;
    let float = sample(runs, || {
        conv2d_forward(&asign, &wsign, &spec, 1.0)
            .map(drop)
            .map_err(Into::into)
    })?;
    let p = report("packed 1x1 conv c=64", &packed);
    let f = report("float 1x1 conv c=64", &float);
    println!("1x1 conv speedup (float / packed): {:.2}x", f / p);
    Ok(true)
}
