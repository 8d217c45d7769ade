use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use elbnn_core::config::RunConfig;
use elbnn_core::model::{
    build_initialized, dump_gamma, el_overhead, flops_count, render_gamma_table, Family,
};
use elbnn_core::train::{evaluate, load_dataset, run_training, Dataset};
use elbnn_core::verify::{run_verify, Kernels};
use elbnn_core::Network;

use crate::ConfigArgs;

pub const MANIFEST: &str = "manifest.cfg";

impl ConfigArgs {
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push(format!("{k}={v}"));
            }
        };
        push("model.arch", self.arch.clone());
        push("model.row", self.row.clone());
        push("model.width", self.width.map(|v| v.to_string()));
        push("model.input_size", self.input_size.map(|v| v.to_string()));
        push("data.dataset", self.dataset.clone());
        push(
            "data.path",
            self.data_dir.as_ref().map(|p| p.display().to_string()),
        );
        push("train.epochs", self.epochs.map(|v| v.to_string()));
        push("train.seed", self.seed.map(|v| v.to_string()));
        push("train.batch_size", self.batch_size.map(|v| v.to_string()));
        out.extend(self.set.iter().cloned());
        out
    }

    /// Config file (or `fallback` when no `--config` is given) plus flags.
    pub fn resolve_with(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let file = self.config.as_deref().or(fallback);
        let text = match file {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        Ok(RunConfig::load(&text, &self.overrides())?)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        self.resolve_with(None)
    }
}

/// The manifest written next to a checkpoint, if there is one.
fn sibling_manifest(checkpoint: &Path) -> Option<std::path::PathBuf> {
    let p = checkpoint.parent()?.join(MANIFEST);
    p.is_file().then_some(p)
}

pub fn build(cfg: &RunConfig) -> Result<Network> {
    build_initialized::<f32>(&cfg.arch, cfg.train.seed).with_context(|| {
        format!(
            "building {} at {1}x{1} input (downsampling links need even feature maps)",
            cfg.arch.family, cfg.arch.input_size
        )
    })
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let Some(id) = cfg.data.dataset else {
        bail!("no dataset configured (use --dataset or [data] dataset = ...)");
    };
    let Some(dir) = cfg.data.path.as_deref() else {
        bail!("no dataset directory configured (use --data-dir or [data] path = ...)");
    };
    let mut d =
        load_dataset(id, dir).with_context(|| format!("loading {id} from {}", dir.display()))?;
    if cfg.data.train_limit > 0 {
        d.train.truncate(cfg.data.train_limit);
    }
    if cfg.data.test_limit > 0 {
        d.test.truncate(cfg.data.test_limit);
    }
    Ok(d)
}

pub fn train(args: &ConfigArgs, out: &Path) -> Result<bool> {
    let cfg = args.resolve()?;
    let mut graph = build(&cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(MANIFEST), cfg.manifest())?;
    println!(
        "arch {} width {} input {}x{}x{} params {}",
        cfg.arch.family,
        cfg.arch.width,
        cfg.arch.in_channels,
        cfg.arch.input_size,
        cfg.arch.input_size,
        graph.param_count()
    );
    if cfg.train.epochs == 0 {
        let path = out.join("final.elbn");
        graph.save_checkpoint(&path)?;
        println!(
            "epochs = 0: saved untrained checkpoint to {}",
            path.display()
        );
        return Ok(true);
    }
    let data = load_data(&cfg)?;
    if data.train.images.shape().c != cfg.arch.in_channels
        || data.train.images.shape().h != cfg.arch.input_size
    {
        bail!(
            "dataset images are {}x{}x{} but the network expects {}x{}x{}",
            data.train.images.shape().c,
            data.train.images.shape().h,
            data.train.images.shape().w,
            cfg.arch.in_channels,
            cfg.arch.input_size,
            cfg.arch.input_size
        );
    }
    println!(
        "train {} test {} samples",
        data.train.len(),
        data.test.len()
    );
    let epochs = cfg.train.epochs;
    let summary = run_training(&mut graph, &data, &cfg.train, Some(out), &mut |e| {
        println!(
            "epoch {:>3}/{epochs} lr {:.1e} train loss {:.4} top1 {:.2}% | test loss {:.4} top1 {:.2}%",
            e.epoch + 1,
            e.lr,
            e.train_loss,
            100.0 * e.train_top1,
            e.test.loss,
            100.0 * e.test.top1
        );
    })?;
    if let Some(top1) = summary.final_test_top1() {
        println!("final test top-1: {:.2}%", 100.0 * top1);
    }
    Ok(true)
}

pub fn eval(args: &ConfigArgs, checkpoint: &Path) -> Result<bool> {
    let cfg = args.resolve_with(sibling_manifest(checkpoint).as_deref())?;
    let mut graph = build(&cfg)?;
    graph
        .load_checkpoint(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let data = load_data(&cfg)?;
    let r = evaluate(&mut graph, &data.test, cfg.train.eval_batch_size)?;
    println!(
        "test top-1: {:.2}% ({} samples), loss {:.4}",
        100.0 * r.top1,
        r.count,
        r.loss
    );
    Ok(true)
}

pub fn flops(args: &ConfigArgs) -> Result<bool> {
    let cfg = args.resolve()?;
    let graph = build(&cfg)?;
    print!("{}", flops_count(&graph)?.render());
    if cfg.arch.toggles.any_link() {
        let o = el_overhead(&cfg.arch)?;
        println!(
            "EL overhead: +{:.2}M ops over {:.1}M without links ({:.2}%)",
            o.extra() / 1e6,
            o.without_links / 1e6,
            100.0 * o.ratio()
        );
    } else {
        println!("EL overhead: no links enabled");
    }
    if cfg.arch.family == Family::ElResnet50 && cfg.arch.input_size != 224 {
        println!("note: overhead figures are usually quoted at 224x224 input");
    }
    Ok(true)
}

pub fn verify(mutate: Option<&str>) -> Result<bool> {
    let kernels = match mutate {
        Some(name) => {
            println!("mutated kernel: {name}");
            Kernels::mutated(name)?
        }
        None => Kernels::default(),
    };
    let reports = run_verify(&kernels);
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!(
        "verify: {} of {} checks passed",
        reports.len() - failed,
        reports.len()
    );
    Ok(failed == 0)
}

pub fn gamma_dump(args: &ConfigArgs, checkpoint: Option<&Path>) -> Result<bool> {
    let cfg = args.resolve_with(checkpoint.and_then(sibling_manifest).as_deref())?;
    let mut graph = build(&cfg)?;
    if let Some(p) = checkpoint {
        graph
            .load_checkpoint(p)
            .with_context(|| format!("loading {}", p.display()))?;
    }
    print!("{}", render_gamma_table(&dump_gamma(&graph)));
    Ok(true)
}
