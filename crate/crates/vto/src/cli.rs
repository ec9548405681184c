//! Operator surface: dataset generation, training, sampling, finetuning,
//! and evaluation as reproducible seeded commands. Every artifact-producing
//! command writes a run manifest next to its outputs.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::arch::{load_from_lower_resolution, UDiTConfig};
use crate::attrs::parse_attribute_text;
use crate::error::{Result, VtoError};
use crate::finetune::{
    build_finetune_set, finetune_person_features, pack_size_ratio, save_subject_pack, shape_grid,
    SubjectPack,
};
use crate::imgio;
use crate::metrics::{evaluate_model, report_to_text};
use crate::synth::{generate_dataset, pose_grid, GenOptions, SampleRecord, Split};
use crate::train::{
    config_to_text, lr_at, parse_config, prepare, run_to_completion, Stage, TrainConfig,
    TrainState,
};

#[derive(Parser)]
#[command(
    name = "vto",
    about = "Conditional diffusion virtual try-on lab",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a procedural paired try-on dataset.
    Datagen {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Generation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of training pairs to draw.
        #[arg(long)]
        count: usize,
        /// Optional key=value generation config file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model stage per a key=value config file.
    Train {
        /// Training config (stage, resolution, steps, ...).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory from `datagen`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint and log.
        #[arg(long)]
        out: PathBuf,
        /// Lower-resolution init checkpoint (required for stage2).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Sample try-on images for dataset records.
    Sample {
        /// Checkpoint directory from `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory providing the conditioning records.
        #[arg(long)]
        data: PathBuf,
        /// Record indices to condition on.
        #[arg(long, num_args = 1.., required = true)]
        index: Vec<usize>,
        /// Attribute text overriding the record's garment attributes.
        #[arg(long)]
        attrs: Option<String>,
        #[arg(long, default_value_t = 2.0)]
        guidance: f64,
        /// Ancestral sampler steps.
        #[arg(long, default_value_t = 256)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output PNG grid path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune person features for one subject record.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Subject record index in the dataset.
        #[arg(long)]
        index: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Finetune-set grid: number of poses and body shapes.
        #[arg(long, default_value_t = 6)]
        poses: usize,
        #[arg(long, default_value_t = 4)]
        shapes: usize,
        #[arg(long, default_value_t = 2.0)]
        guidance: f64,
        /// Sampler steps when synthesizing the finetune set.
        #[arg(long, default_value_t = 64)]
        sample_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output subject pack directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to evaluate: val or train.
        #[arg(long, default_value = "val")]
        split: String,
        /// Explicitly allow evaluating on the training split.
        #[arg(long, default_value_t = false)]
        allow_train_eval: bool,
        #[arg(long, default_value_t = 2.0)]
        guidance: f64,
        #[arg(long, default_value_t = 64)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cap on evaluated records (0 = all).
        #[arg(long, default_value_t = 0)]
        limit: usize,
        /// Output directory for report and sample grid.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Key=value generation config; unknown keys are usage errors.
pub fn parse_gen_config(text: &str) -> Result<GenOptions> {
    let mut opts = GenOptions::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| VtoError::Parse {
            position: lineno + 1,
            message: msg,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let parse_f = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| bad(format!("bad value {v:?} for {key}")))
        };
        match key {
            "native_height" => {
                opts.native_height = value
                    .parse()
                    .map_err(|_| bad(format!("bad value {value:?} for native_height")))?
            }
            "layflat_fraction" => opts.layflat_fraction = parse_f(value)?,
            "full_fraction" => opts.full_fraction = parse_f(value)?,
            "tucked_fraction" => opts.tucked_fraction = parse_f(value)?,
            "outer_fraction" => opts.outer_fraction = parse_f(value)?,
            "val_fraction" => opts.val_fraction = parse_f(value)?,
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    Ok(opts)
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config: &str,
    seed: u64,
    outputs: &[&Path],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| VtoError::io(dir, e))?;
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let out_list: Vec<String> = outputs.iter().map(|p| p.display().to_string()).collect();
    let body = format!(
        "command={command}\nversion={}\nseed={seed}\ntimestamp={now}\noutputs={}\nconfig:\n{config}",
        env!("CARGO_PKG_VERSION"),
        out_list.join(",")
    );
    let path = dir.join("run_manifest.txt");
    std::fs::write(&path, body).map_err(|e| VtoError::io(&path, e))?;
    Ok(())
}

fn load_checkpoint(dir: &Path) -> Result<TrainState<f32>> {
    crate::train::load_state::<f32>(dir)
}

fn load_records(data: &Path) -> Result<Vec<SampleRecord>> {
    crate::synth::load_dataset(data)
}

struct Tee<'a> {
    file: std::fs::File,
    echo: &'a mut dyn Write,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.file.write_all(buf)?;
        self.echo.write_all(buf)?;
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()?;
        self.echo.flush()
    }
}

fn cmd_datagen(out: &Path, seed: u64, count: usize, config: Option<&Path>) -> Result<()> {
    let config_text = match config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| VtoError::io(p, e))?,
        None => String::new(),
    };
    let opts = parse_gen_config(&config_text)?;
    let records = generate_dataset(out, &opts, seed, count)?;
    let manifest_path = out.join("manifest.jsonl");
    let n_tucked = records
        .iter()
        .filter(|r| r.attribute_text.contains("tucked in?: Yes"))
        .count();
    let stats = format!(
        "{config_text}\nrecords={}\ntucked={}\n",
        records.len(),
        n_tucked
    );
    write_manifest(out, "datagen", &stats, seed, &[&manifest_path])?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

fn cmd_train(config_path: &Path, data: &Path, out: &Path, init: Option<&Path>) -> Result<()> {
    let config_text =
        std::fs::read_to_string(config_path).map_err(|e| VtoError::io(config_path, e))?;
    let cfg: TrainConfig = parse_config(&config_text)?;
    let records = load_records(data)?;
    let train_records: Vec<SampleRecord> = records
        .into_iter()
        .filter(|r| r.split == Split::Train)
        .collect();

    let model = match cfg.stage {
        Stage::Stage2 => {
            let init = init.ok_or_else(|| {
                VtoError::Config("stage2 requires --init with the stage-1 checkpoint".into())
            })?;
            let lower = load_checkpoint(init)?;
            load_from_lower_resolution(&lower.model.params, lower.model.config.doubled())?
        }
        Stage::CascadeSr => {
            let mut arch = UDiTConfig::toy(cfg.height);
            arch.extra_input_channels = 3;
            crate::arch::UDiT::new(arch, cfg.seed)?
        }
        _ => crate::arch::UDiT::new(UDiTConfig::toy(cfg.height), cfg.seed)?,
    };
    if model.config.input_height != cfg.height {
        return Err(VtoError::Config(format!(
            "checkpoint resolution {} does not match config height {}",
            model.config.input_height, cfg.height
        )));
    }
    let sr_extra = model.config.extra_input_channels > 0;
    let data_prepared = prepare::<f32>(&train_records, cfg.height, sr_extra)?;
    let mut state = TrainState::new(model, cfg.seed);

    std::fs::create_dir_all(out).map_err(|e| VtoError::io(out, e))?;
    let log_path = out.join("train.log");
    let mut stdout = std::io::stdout();
    let mut tee = Tee {
        file: std::fs::File::create(&log_path).map_err(|e| VtoError::io(&log_path, e))?,
        echo: &mut stdout,
    };
    run_to_completion(&mut state, &cfg, &data_prepared, &mut tee)?;

    let ckpt_dir = out.join("checkpoint");
    crate::train::save_state(&ckpt_dir, &state)?;
    write_manifest(out, "train", &config_to_text(&cfg), cfg.seed, &[&ckpt_dir, &log_path])?;
    println!(
        "trained {} steps at {}x{} (final lr {})",
        cfg.total_steps,
        cfg.height,
        cfg.width,
        lr_at(cfg.total_steps, &cfg)
    );
    Ok(())
}

fn cmd_sample(
    checkpoint: &Path,
    data: &Path,
    indices: &[usize],
    attrs: Option<&str>,
    guidance: f64,
    steps: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let state = load_checkpoint(checkpoint)?;
    let records = load_records(data)?;
    let attr_override = match attrs {
        Some(text) => Some(parse_attribute_text(text)?),
        None => None,
    };
    let h = state.model.config.input_height;
    let mut conds = Vec::with_capacity(indices.len());
    for &i in indices {
        let rec = records.get(i).ok_or_else(|| {
            VtoError::RejectedInput(format!("record index {i} out of range (dataset has {})", records.len()))
        })?;
        let (_, mut cond) = rec.at_resolution(h)?.conditioning::<f32>()?;
        if let Some(a) = &attr_override {
            cond.attributes = Some(*a);
            cond.validate()?;
        }
        conds.push(cond);
    }
    let images = crate::diffusion::ancestral_sample(
        &state.model.sampler(),
        &conds,
        guidance,
        steps,
        seed,
        &crate::diffusion::DiffusionSchedule::default(),
    )?;
    let grid = imgio::tile_grid(&images, 4);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| VtoError::io(parent, e))?;
        }
    }
    imgio::save_png_rgb(out, &grid)?;
    if let Some(dir) = out.parent() {
        let cfg = format!(
            "indices={indices:?}\nguidance={guidance}\nsteps={steps}\nattrs={}\n",
            attrs.unwrap_or("<record>")
        );
        write_manifest(dir, "sample", &cfg, seed, &[out])?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune(
    checkpoint: &Path,
    data: &Path,
    index: usize,
    steps: usize,
    lr: f64,
    poses: usize,
    shapes: usize,
    guidance: f64,
    sample_steps: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let state = load_checkpoint(checkpoint)?;
    let records = load_records(data)?;
    let subject = records.get(index).ok_or_else(|| {
        VtoError::RejectedInput(format!("record index {index} out of range (dataset has {})", records.len()))
    })?;
    let mut stderr = std::io::stderr();
    let set = build_finetune_set(
        &state.model,
        subject,
        &pose_grid(poses),
        &shape_grid(shapes),
        guidance,
        sample_steps,
        seed,
        &mut stderr,
    )?;
    let h = state.model.config.input_height;
    let (_, ref_cond) = subject.at_resolution(h)?.conditioning::<f32>()?;
    let (f_p, loss_curve) = finetune_person_features(&state.model, &ref_cond, &set, steps, lr)?;
    let ratio = pack_size_ratio(&f_p, &state.model);
    let pack = SubjectPack {
        subject_id: format!("record-{index}"),
        f_p,
        steps,
        lr,
        loss_curve,
        reference: Some(subject.clone()),
    };
    save_subject_pack(out, &pack)?;
    let cfg = format!(
        "index={index}\nsteps={steps}\nlr={lr}\nposes={poses}\nshapes={shapes}\nfinetune_set={}\nsize_ratio={ratio}\nsize_ok={}\n",
        set.len(),
        ratio <= 0.002
    );
    write_manifest(out, "finetune", &cfg, seed, &[&out.join("fp")])?;
    println!(
        "subject pack at {} (feature/model size ratio {ratio:.5})",
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    allow_train_eval: bool,
    guidance: f64,
    steps: usize,
    seed: u64,
    limit: usize,
    out: &Path,
) -> Result<()> {
    let want = match split {
        "val" => Split::Val,
        "train" => {
            if !allow_train_eval {
                return Err(VtoError::Config(
                    "evaluating on the training split requires --allow-train-eval".into(),
                ));
            }
            Split::Train
        }
        other => {
            return Err(VtoError::Config(format!(
                "unknown split {other:?} (expected val or train)"
            )))
        }
    };
    let state = load_checkpoint(checkpoint)?;
    let mut records: Vec<SampleRecord> = load_records(data)?
        .into_iter()
        .filter(|r| r.split == want)
        .collect();
    if limit > 0 && records.len() > limit {
        records.truncate(limit);
    }
    let (report, generated) = evaluate_model(&state.model, &records, guidance, steps, seed)?;
    std::fs::create_dir_all(out).map_err(|e| VtoError::io(out, e))?;
    let report_path = out.join("report.txt");
    std::fs::write(&report_path, report_to_text(&report))
        .map_err(|e| VtoError::io(&report_path, e))?;
    let grid_path = out.join("grid.png");
    imgio::save_png_rgb(&grid_path, &imgio::tile_grid(&generated, 4))?;
    let cfg = format!("split={split}\nguidance={guidance}\nsteps={steps}\nlimit={limit}\n");
    write_manifest(out, "eval", &cfg, seed, &[&report_path, &grid_path])?;
    println!("{}", report_to_text(&report).trim_end());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen {
            out,
            seed,
            count,
            config,
        } => cmd_datagen(&out, seed, count, config.as_deref()),
        Command::Train {
            config,
            data,
            out,
            init,
        } => cmd_train(&config, &data, &out, init.as_deref()),
        Command::Sample {
            checkpoint,
            data,
            index,
            attrs,
            guidance,
            steps,
            seed,
            out,
        } => cmd_sample(
            &checkpoint,
            &data,
            &index,
            attrs.as_deref(),
            guidance,
            steps,
            seed,
            &out,
        ),
        Command::Finetune {
            checkpoint,
            data,
            index,
            steps,
            lr,
            poses,
            shapes,
            guidance,
            sample_steps,
            seed,
            out,
        } => cmd_finetune(
            &checkpoint,
            &data,
            index,
            steps,
            lr,
            poses,
            shapes,
            guidance,
            sample_steps,
            seed,
            &out,
        ),
        Command::Eval {
            checkpoint,
            data,
            split,
            allow_train_eval,
            guidance,
            steps,
            seed,
            limit,
            out,
        } => cmd_eval(
            &checkpoint,
            &data,
            &split,
            allow_train_eval,
            guidance,
            steps,
            seed,
            limit,
            &out,
        ),
    }
}

/// Binary entry point: map errors to the documented exit codes
/// (0 success, 2 usage, 3 I/O, 4 numerical).
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_config_parses_and_rejects_unknown_keys() {
        let opts = parse_gen_config("native_height=64\ntucked_fraction=0.5\n").unwrap();
        assert_eq!(opts.native_height, 64);
        assert_eq!(opts.tucked_fraction, 0.5);
        assert!(parse_gen_config("bogus=1\n").is_err());
        assert!(parse_gen_config("native_height=abc\n").is_err());
        // Defaults survive an empty config.
        let d = parse_gen_config("").unwrap();
        assert_eq!(d.native_height, GenOptions::default().native_height);
    }

    #[test]
    fn cli_parses_subcommands() {
        let cli = Cli::try_parse_from([
            "vto", "datagen", "--out", "/tmp/x", "--count", "10", "--seed", "3",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::Datagen { seed: 3, count: 10, .. }));
        let cli = Cli::try_parse_from([
            "vto",
            "sample",
            "--checkpoint",
            "c",
            "--data",
            "d",
            "--index",
            "0",
            "--out",
            "o.png",
        ])
        .unwrap();
        if let Command::Sample { steps, guidance, .. } = cli.command {
            assert_eq!(steps, 256, "sampler steps default");
            assert_eq!(guidance, 2.0);
        } else {
            panic!("expected sample command");
        }
        // Missing required flag is a parse error.
        assert!(Cli::try_parse_from(["vto", "datagen", "--out", "/tmp/x"]).is_err());
    }
}
