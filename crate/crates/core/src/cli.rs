//! `sta-lab` commands.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::data::synthesize;
use crate::error::{Error, Result};
use crate::eval::{block_similarity, capture_activations, dice_score, iou_score, ActivationDump, LabelMap, Matrix};
use crate::flops::flops_model;
use crate::io::{self, Checkpoint, Pgm, RunConfig};
use crate::model::StaUnet;
use crate::train::{seeded_rng, train};

#[derive(Debug, Parser)]
#[command(name = "sta-lab", version, about = "Super token attention U-Net toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the command (data generation or training).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Restart the poly schedule every epoch.
    #[arg(long, global = true)]
    pub poly_per_epoch: bool,
    /// Checkpoint to read (overrides `checkpoint`).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Activation dump directory for `analyze-cka` (default `<out>/activations`).
    #[arg(long, global = true)]
    pub dump_dir: Option<PathBuf>,
    /// Class ids left out of the mean scores, e.g. `0` or `0,3`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub exclude_classes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    GenData,
    /// Train a model and write a checkpoint plus metric log.
    Train,
    /// Score a checkpoint on a dataset split.
    Eval,
    /// Write attention-block activations as `.tns` containers.
    DumpActivations,
    /// Block-by-block CKA matrix and heatmap from an activation dump.
    AnalyzeCka,
    /// Per-layer FLOPs report.
    Flops,
}

/// Resolved inputs of one invocation.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub config: RunConfig,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub dump_dir: Option<PathBuf>,
}

impl Invocation {
    pub fn from_cli(cli: &Cli) -> Result<Self> {
        let path = cli.config.as_deref().ok_or_else(|| Error::Config {
            path: "--config".into(),
            msg: "a configuration file is required".into(),
        })?;
        let mut config = RunConfig::load(path)?;
        if let Some(seed) = cli.seed {
            config.train.seed = seed;
            config.gen_data.seed = seed;
        }
        if cli.poly_per_epoch {
            config.train.poly_per_epoch = true;
        }
        if let Some(ex) = &cli.exclude_classes {
            config.eval.exclude_classes = ex.clone();
        }
        Ok(Self {
            out: cli.out.clone().or_else(|| config.output_dir.clone()),
            checkpoint: cli.checkpoint.clone().or_else(|| config.checkpoint.clone()),
            dump_dir: cli.dump_dir.clone(),
            config,
        })
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Config {
            path: "output_dir".into(),
            msg: "no output directory (set output_dir or pass --out)".into(),
        })
    }

    fn dataset_dir(&self) -> Result<&Path> {
        let dir = self.config.dataset_dir.as_deref().ok_or_else(|| Error::Config {
            path: "dataset_dir".into(),
            msg: "no dataset directory configured".into(),
        })?;
        if !dir.is_dir() {
            return Err(Error::InvalidArgument(format!("dataset directory {} does not exist", dir.display())));
        }
        Ok(dir)
    }

    fn checkpoint_path(&self) -> Result<PathBuf> {
        match &self.checkpoint {
            Some(p) => Ok(p.clone()),
            None => Ok(self.out_dir()?.join(CHECKPOINT_FILE)),
        }
    }

    fn load_model(&self) -> Result<StaUnet<f32>> {
        let ckpt = Checkpoint::load(&self.checkpoint_path()?)?;
        let mut model = StaUnet::new(ckpt.header.model.clone(), &mut seeded_rng(0))?;
        let expected = self.config.model.to_config();
        if expected != ckpt.header.model {
            return Err(Error::InvalidArgument(
                "checkpoint architecture does not match the configured model".into(),
            ));
        }
        ckpt.apply_to(&mut model)?;
        Ok(model)
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.stau";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn run(cli: &Cli) -> Result<()> {
    threads_from_env()?;
    let inv = Invocation::from_cli(cli)?;
    match cli.command {
        Command::GenData => gen_data(&inv),
        Command::Train => cmd_train(&inv),
        Command::Eval => cmd_eval(&inv),
        Command::DumpActivations => cmd_dump_activations(&inv),
        Command::AnalyzeCka => cmd_analyze_cka(&inv),
        Command::Flops => cmd_flops(&inv),
    }
}

/// Worker-thread cap from `STA_LAB_THREADS` (default 1). Every command
/// currently runs on the calling thread, which satisfies any cap.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("STA_LAB_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n >= 1).ok_or_else(|| Error::Config {
            path: "STA_LAB_THREADS".into(),
            msg: format!("expected a positive integer, got `{v}`"),
        }),
    }
}

pub fn gen_data(inv: &Invocation) -> Result<()> {
    let cfg = &inv.config;
    let dir = match &cfg.dataset_dir {
        Some(d) if inv.out.is_none() => d.clone(),
        _ => inv.out_dir()?.to_path_buf(),
    };
    let opts = &cfg.gen_data;
    if opts.synth.num_classes != cfg.model.num_classes || (opts.synth.height, opts.synth.width) != cfg.model.input_extent {
        return Err(Error::Config {
            path: "gen_data.synth".into(),
            msg: "synthetic extent/classes must match the model section".into(),
        });
    }
    let splits = opts
        .splits
        .iter()
        .map(|(name, &n)| synthesize(&opts.synth, name, n, opts.seed).map(|d| (name.as_str(), d)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(&str, &crate::data::Dataset)> = splits.iter().map(|(n, d)| (*n, d)).collect();
    io::write_dataset(&dir, &refs)?;
    log::info!("wrote {} splits to {}", refs.len(), dir.display());
    Ok(())
}

pub fn cmd_train(inv: &Invocation) -> Result<()> {
    let cfg = &inv.config;
    let out = inv.out_dir()?;
    let data = io::load_split(inv.dataset_dir()?, "train")?;
    let mut model = StaUnet::<f32>::new(cfg.model.to_config(), &mut seeded_rng(cfg.train.seed))?;
    let report = train(&mut model, &data, &cfg.train, |r| {
        log::info!("epoch {} iter {} lr {:.3e} loss {:.5}", r.epoch, r.iter, r.lr, r.loss);
    })?;
    let echo = serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?;
    let last_epoch = report.records.last().map_or(0, |r| r.epoch);
    Checkpoint::from_model(&model, echo, last_epoch, report.iterations()).save(&out.join(CHECKPOINT_FILE))?;
    io::write_atomic(&out.join(METRICS_FILE), report.metrics_csv().as_bytes())?;
    io::write_atomic(&out.join("config.json"), cfg.to_json().as_bytes())?;
    Ok(())
}

/// Per-case and summary scores of a model on a dataset split.
#[derive(Debug, Clone, Serialize)]
pub struct EvalTable {
    pub num_classes: usize,
    pub rows: Vec<(String, Vec<f64>, Vec<f64>)>,
    pub exclude: Vec<usize>,
}

impl EvalTable {
    fn mean_of(v: &[f64], exclude: &[usize]) -> f64 {
        let kept: Vec<f64> = v.iter().enumerate().filter(|(c, _)| !exclude.contains(c)).map(|(_, &x)| x).collect();
        kept.iter().sum::<f64>() / kept.len() as f64
    }

    /// Column-wise mean over cases: per-class DSC, per-class IoU.
    pub fn summary(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.rows.len() as f64;
        let k = self.num_classes;
        let mut d = vec![0.0; k];
        let mut j = vec![0.0; k];
        for (_, dsc, iou) in &self.rows {
            for c in 0..k {
                d[c] += dsc[c] / n;
                j[c] += iou[c] / n;
            }
        }
        (d, j)
    }

    pub fn mean_dsc(&self) -> f64 {
        Self::mean_of(&self.summary().0, &self.exclude)
    }

    pub fn to_csv(&self) -> String {
        let k = self.num_classes;
        let mut s = String::from("case");
        for c in 0..k {
            s.push_str(&format!(",dsc_{c}"));
        }
        for c in 0..k {
            s.push_str(&format!(",iou_{c}"));
        }
        s.push_str(",mean_dsc,mean_iou\n");
        let line = |name: &str, d: &[f64], j: &[f64]| {
            let mut l = name.to_string();
            for v in d.iter().chain(j) {
                l.push_str(&format!(",{v:?}"));
            }
            l.push_str(&format!(",{:?},{:?}\n", Self::mean_of(d, &self.exclude), Self::mean_of(j, &self.exclude)));
            l
        };
        for (name, d, j) in &self.rows {
            s.push_str(&line(name, d, j));
        }
        let (d, j) = self.summary();
        s.push_str(&line("mean", &d, &j));
        s
    }
}

/// Inference-mode scores on every sample of `data`.
pub fn evaluate(model: &mut StaUnet<f32>, data: &crate::data::Dataset, exclude: &[usize], batch_size: usize) -> Result<EvalTable> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let k = model.config.num_classes;
    let mut rows = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch::<f32>(chunk);
        let probs = model.predict(&images)?;
        let pred = LabelMap::argmax(&probs)?;
        for (i, &idx) in chunk.iter().enumerate() {
            let (p, g) = (pred.sample(i), labels.sample(i));
            let dsc = dice_score(&p, &g, k, exclude)?;
            let iou = iou_score(&p, &g, k, exclude)?;
            rows.push((data.samples[idx].name.clone(), dsc.per_class, iou.per_class));
        }
    }
    Ok(EvalTable {
        num_classes: k,
        rows,
        exclude: exclude.to_vec(),
    })
}

pub fn cmd_eval(inv: &Invocation) -> Result<()> {
    let out = inv.out_dir()?;
    let mut model = inv.load_model()?;
    let opts = &inv.config.eval;
    let data = io::load_split(inv.dataset_dir()?, &opts.split)?;
    let table = evaluate(&mut model, &data, &opts.exclude_classes, opts.batch_size)?;
    io::write_atomic(&out.join("eval.csv"), table.to_csv().as_bytes())?;
    println!("mean DSC {:.4} over {} cases", table.mean_dsc(), table.rows.len());
    Ok(())
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct DumpIndex {
    pub blocks: Vec<DumpEntry>,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct DumpEntry {
    pub name: String,
    pub file: String,
}

/// Write one `.tns` per block (f64, `samples × features`) plus `index.json`.
pub fn write_dump(dir: &Path, dump: &ActivationDump) -> Result<()> {
    let mut entries = Vec::new();
    for (i, (name, m)) in dump.blocks.iter().enumerate() {
        let file = format!("{i:02}_{name}.tns");
        let t = crate::tensor::Tensor::new(&[m.rows, m.cols], m.data.clone())?;
        io::save_tns(&dir.join(&file), &t)?;
        entries.push(DumpEntry { name: name.clone(), file });
    }
    let index = DumpIndex {
        blocks: entries,
        samples: dump.samples().unwrap_or(0),
    };
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::Format(e.to_string()))?;
    io::write_atomic(&dir.join("index.json"), json.as_bytes())
}

pub fn read_dump(dir: &Path) -> Result<ActivationDump> {
    let path = dir.join("index.json");
    let index: DumpIndex = serde_json::from_slice(&io::read_file(&path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let blocks = index
        .blocks
        .iter()
        .map(|e| {
            let t = io::load_tns(&dir.join(&e.file))?.to_f64();
            if t.rank() != 2 {
                return Err(Error::Format(format!("{}: expected a 2-d matrix", e.file)));
            }
            Ok((e.name.clone(), Matrix::new(t.shape()[0], t.shape()[1], t.into_data())?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ActivationDump { blocks })
}

pub fn cmd_dump_activations(inv: &Invocation) -> Result<()> {
    let out = inv.out_dir()?;
    let opts = &inv.config.cka;
    let mut model = inv.load_model()?;
    let data = io::load_split(inv.dataset_dir()?, &opts.split)?;
    let n = opts.samples.min(data.len());
    if n < 2 {
        return Err(Error::InvalidArgument(format!("split `{}` has fewer than 2 samples", opts.split)));
    }
    let (images, _) = data.batch::<f32>(&(0..n).collect::<Vec<_>>());
    let blocks = if opts.blocks.is_empty() {
        model.block_names()
    } else {
        opts.blocks.clone()
    };
    let dump = capture_activations(&mut model, &images, &blocks, opts.max_features, inv.config.train.seed)?;
    write_dump(&inv.dump_dir.clone().unwrap_or_else(|| out.join("activations")), &dump)
}

pub fn cmd_analyze_cka(inv: &Invocation) -> Result<()> {
    let out = inv.out_dir()?;
    let dir = inv.dump_dir.clone().unwrap_or_else(|| out.join("activations"));
    let dump = read_dump(&dir)?;
    let raw = block_similarity(&dump, inv.config.cka.bandwidth)?;
    let norm = raw.min_max();
    io::write_atomic(&out.join("cka.csv"), raw.to_csv().as_bytes())?;
    io::write_atomic(&out.join("cka_minmax.csv"), norm.to_csv().as_bytes())?;
    let b = raw.names.len();
    Pgm {
        width: b,
        height: b,
        pixels: norm.to_gray(),
    }
    .save(&out.join("cka_heatmap.pgm"))?;
    let (shallow, deep) = raw.shallow_redundancy();
    println!("blocks {b}; mean off-diagonal CKA: first half {shallow:.4}, second half {deep:.4}");
    Ok(())
}

pub fn cmd_flops(inv: &Invocation) -> Result<()> {
    let base = inv.config.model.to_config();
    let report = flops_model(&base)?;
    print!("{}", report.to_table());
    let mut summary = String::from("token_sizes,total_flops\n");
    let schedules = std::iter::once(base.stages.iter().map(|s| s.token_size.0).collect::<Vec<_>>())
        .chain(inv.config.flops.schedules.iter().map(|s| s.to_vec()));
    for sched in schedules {
        let arr: [usize; 4] = sched.clone().try_into().expect("4 stages");
        let total = flops_model(&base.clone().with_token_sizes(arr))?.total;
        println!("token sizes {sched:?}: {total} FLOPs");
        summary.push_str(&format!(
            "{},{total}\n",
            sched.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("-")
        ));
    }
    if let Some(out) = &inv.out {
        io::write_atomic(&out.join("flops.csv"), report.to_csv().as_bytes())?;
        io::write_atomic(&out.join("flops_schedules.csv"), summary.as_bytes())?;
    }
    Ok(())
}
