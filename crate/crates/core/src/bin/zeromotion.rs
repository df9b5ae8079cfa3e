use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use zeromotion::codec::{decode_sequence, encode_sequence, CodecConfig};
use zeromotion::config::FileConfig;
use zeromotion::data::{load_clip_index, load_sequence, save_png_dir, InputFormat, Sequence};
use zeromotion::entropy::{read_container, write_container};
use zeromotion::metrics::{bd_rate_psnr, QualityMetric};
use zeromotion::model::{lambda_index, Model};
use zeromotion::profile::profile_complexity;
use zeromotion::report::{average_curve, evaluate_sequence, rd_csv, read_rd_csv, RdRow};
use zeromotion::stats::layer_stats;
use zeromotion::train::{finetune_rate_point, train_all, Dataset};
use zeromotion::{Error, Result};

#[derive(Parser)]
#[command(name = "zeromotion", version, about = "Two-layer B-frame learned video codec without motion coding")]
struct Cli {
    /// Seed for weight initialisation and training sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Key-value configuration file with [model], [train] and [codec] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CodecFlags {
    /// GOP size (1, 2, 4, 8, 16 or 32).
    #[arg(long)]
    gop: Option<usize>,
    /// Rate point index 0..=3 into the metric's lambda table.
    #[arg(long)]
    lambda_index: Option<u8>,
    #[arg(long, value_parser = ["mse", "msssim"])]
    quality_metric: Option<String>,
}

#[derive(Args, Clone)]
struct InputFlags {
    /// PNG directory (frame_00000.png, ...) or raw YUV 4:2:0 file.
    #[arg(long)]
    input: PathBuf,
    /// Treat the input as raw YUV 4:2:0 of this size, e.g. 1920x1080.
    #[arg(long)]
    yuv: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full training schedule, then fine-tune the other rate points.
    Train {
        /// Output bundle for the highest rate point.
        #[arg(long)]
        out: PathBuf,
        /// Clip index: newline-separated directories of seven PNG frames.
        #[arg(long, conflicts_with = "synthetic")]
        data: Option<PathBuf>,
        /// Held-out clip index; defaults to the last tenth of --data.
        #[arg(long, requires = "data")]
        val: Option<PathBuf>,
        /// Train on this many synthetic moving-texture clips instead.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Side of the synthetic clips.
        #[arg(long, default_value_t = 80)]
        side: usize,
        /// Also fine-tune these lambdas, written next to --out as <stem>-<lambda>.tlzw.
        #[arg(long, value_delimiter = ',')]
        finetune: Vec<f64>,
    },
    /// Code a sequence into a bitstream.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        input: InputFlags,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        codec: CodecFlags,
    },
    /// Decode a bitstream into a PNG directory.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Code a sequence with one or more bundles and report RD points, or
    /// compare two RD CSV files.
    Eval {
        /// Bundles to evaluate, one RD point each.
        #[arg(long, value_delimiter = ',')]
        model: Vec<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        yuv: Option<String>,
        /// Use an existing RD CSV as the test curve instead of coding.
        #[arg(long, conflicts_with = "model")]
        test: Option<PathBuf>,
        /// Anchor RD CSV for BD-rate.
        #[arg(long)]
        anchor: Option<PathBuf>,
        /// Where to write the RD CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        gop: Option<usize>,
    },
    /// Print parameter and MAC counts per module for one B frame.
    Profile {
        /// Bundle to profile; the configured preset is used otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 1088)]
        height: usize,
        #[arg(long, default_value_t = 1920)]
        width: usize,
    },
    /// Per-frame layer bits and retained fractions of a bitstream, as CSV.
    Stats {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("size must look like WIDTHxHEIGHT, got `{s}`"));
    let (w, h) = s.split_once('x').ok_or_else(bad)?;
    Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

fn read_input(path: &Path, yuv: Option<&str>) -> Result<Sequence> {
    let format = match yuv {
        Some(s) => {
            let (width, height) = parse_size(s)?;
            InputFormat::Yuv420 { width, height }
        }
        None => InputFormat::PngDir,
    };
    load_sequence(path, format)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Flags override the config file; the model's own rate point fills the
/// rest.
fn codec_config(file: &FileConfig, flags: &CodecFlags, model: &Model) -> Result<CodecConfig> {
    let mut cfg = CodecConfig::from(file.codec);
    if model.meta.lambda > 0.0 {
        cfg.metric = model.meta.metric;
        if let Some(i) = lambda_index(model.meta.metric, model.meta.lambda) {
            cfg.lambda_index = i;
        }
    }
    if let Some(g) = flags.gop {
        cfg.gop_size = g;
    }
    if let Some(m) = &flags.quality_metric {
        cfg.metric = m.parse::<QualityMetric>()?;
    }
    if let Some(i) = flags.lambda_index {
        cfg.lambda_index = i;
    }
    Ok(cfg)
}

fn sibling(out: &Path, lambda: f64) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    out.with_file_name(format!("{stem}-{lambda}.tlzw"))
}

fn run(cli: Cli) -> Result<()> {
    let mut file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if let Some(seed) = cli.seed {
        file.train.seed = seed;
    }
    match cli.command {
        Command::Train {
            out,
            data,
            val,
            synthetic,
            side,
            finetune,
        } => {
            let cfg = &file.train;
            let dataset = match (data, synthetic) {
                (Some(index), _) => {
                    let mut train = load_clip_index(&index)?;
                    let val = match val {
                        Some(v) => load_clip_index(&v)?,
                        None => {
                            let keep = train.len() - (train.len() / 10).max(1);
                            train.split_off(keep)
                        }
                    };
                    Dataset::new(train, &val, cfg.crop, cfg.max_k)?
                }
                (None, Some(n)) => {
                    Dataset::synthetic(n, (n / 20).max(4), side, cfg.crop.min(side), cfg.max_k, cfg.seed)?
                }
                (None, None) => {
                    return Err(Error::InvalidArgument("train needs --data or --synthetic".into()));
                }
            };
            let mut model = Model::new(file.model.model_config(), cfg.seed);
            for r in train_all(&mut model, &dataset, cfg)? {
                println!(
                    "step {:<5} iterations {:>6}  val {:.6} -> {:.6}  lr {:.2e}",
                    r.step.name(),
                    r.iterations,
                    r.val_start,
                    r.val_end,
                    r.final_lr
                );
            }
            model.save(&out)?;
            println!("wrote {}", out.display());
            for lambda in finetune {
                let mut m = Model::load(&out)?;
                let r = finetune_rate_point(&mut m, &dataset, cfg, lambda)?;
                let path = sibling(&out, lambda);
                m.save(&path)?;
                println!("fine-tuned lambda {lambda}: val {:.6} -> {:.6}, wrote {}", r.val_start, r.val_end, path.display());
            }
        }
        Command::Encode {
            model,
            input,
            output,
            codec,
        } => {
            let model = Model::load(&model)?;
            let cfg = codec_config(&file, &codec, &model)?;
            let seq = read_input(&input.input, input.yuv.as_deref())?;
            let enc = encode_sequence(&seq, &model, &cfg)?;
            write_file(&output, &write_container(&enc.bitstream)?)?;
            let q = evaluate_sequence(&seq, &enc.recon, &enc.bitstream)?;
            print!("{}", q.to_table());
        }
        Command::Decode { model, input, output } => {
            let model = Model::load(&model)?;
            let bs = read_container(&read_file(&input)?)?;
            let dec = decode_sequence(&bs, &model)?;
            let (w, h) = (bs.header.width as usize, bs.header.height as usize);
            let frames: Vec<_> = dec
                .frames
                .iter()
                .map(|f| zeromotion::data::Frame::new(zeromotion::data::crop_top_left(&f.data, w, h), f.poc))
                .collect();
            save_png_dir(&output, &frames)?;
            println!("decoded {} frames of {w}x{h} to {}", frames.len(), output.display());
        }
        Command::Eval {
            model,
            input,
            yuv,
            test,
            anchor,
            csv,
            gop,
        } => {
            let rows = match test {
                Some(t) => read_rd_csv(&t)?,
                None => {
                    let input = input
                        .ok_or_else(|| Error::InvalidArgument("eval needs --input or --test".into()))?;
                    if model.is_empty() {
                        return Err(Error::InvalidArgument("eval needs at least one --model".into()));
                    }
                    let seq = read_input(&input, yuv.as_deref())?;
                    let name = input.file_stem().and_then(|s| s.to_str()).unwrap_or("sequence").to_string();
                    let flags = CodecFlags {
                        gop,
                        ..CodecFlags::default()
                    };
                    let mut rows = Vec::new();
                    for path in &model {
                        let m = Model::load(path)?;
                        let cfg = codec_config(&file, &flags, &m)?;
                        let enc = encode_sequence(&seq, &m, &cfg)?;
                        let dec = decode_sequence(&enc.bitstream, &m)?;
                        let q = evaluate_sequence(&seq, &dec, &enc.bitstream)?;
                        println!("{} (lambda {})", path.display(), m.meta.lambda);
                        print!("{}", q.to_table());
                        rows.push(RdRow {
                            sequence: name.clone(),
                            lambda: m.meta.lambda,
                            point: q.rd_point(),
                        });
                    }
                    rows
                }
            };
            let text = rd_csv(&rows);
            match &csv {
                Some(p) => write_file(p, text.as_bytes())?,
                None => print!("{text}"),
            }
            if let Some(a) = anchor {
                let anchor_curve = average_curve(&read_rd_csv(&a)?);
                let bd = bd_rate_psnr(&anchor_curve, &average_curve(&rows))?;
                if bd.non_monotone_input {
                    eprintln!("warning: an RD curve is not monotone in quality");
                }
                println!("BD-rate vs anchor: {:+.2}% ({:?} fit)", bd.percent, bd.fit);
            }
        }
        Command::Profile { model, height, width } => {
            let model = match model {
                Some(p) => Model::load(&p)?,
                None => {
                    // An untrained network still profiles the full deployed decoder.
                    let mut m = Model::new(file.model.model_config(), file.train.seed);
                    m.skip_active = true;
                    m
                }
            };
            print!("{}", profile_complexity(&model, height, width)?.to_table());
        }
        Command::Stats { model, input, csv } => {
            let model = Model::load(&model)?;
            let bs = read_container(&read_file(&input)?)?;
            let dec = decode_sequence(&bs, &model)?;
            let stats = layer_stats(&bs, &dec.masks)?;
            let text = stats.to_csv();
            match &csv {
                Some(p) => write_file(p, text.as_bytes())?,
                None => print!("{text}"),
            }
            eprintln!(
                "base layer {:.2}% of B-frame bits (R {:.2}%, NR {:.2}%), mean retained {:.4}",
                stats.base_percent(),
                stats.reference.base_percent(),
                stats.non_reference.base_percent(),
                stats.mean_retained()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
