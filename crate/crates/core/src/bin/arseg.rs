use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use arseg::backbone::{Backbone, BranchConfig};
use arseg::codec::{decode_clip, encode_clip, CodecParams, EncodedClip};
use arseg::creff::{Creff, FusionKind};
use arseg::eval::{bd_metrics, miou_by_distance, run_sequence, write_report, AnnotatedClip, MotionSearch, Pipeline, RateCurve};
use arseg::model::{self, HrJob, LrJob};
use arseg::train::{train_hr_branch, train_lr_branch, LrState};
use arseg::{Error, Result, IGNORE_INDEX};

#[derive(Parser)]
#[command(name = "arseg", version, about = "Altering-resolution segmentation of toy compressed video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a directory of `*.tnsr` frames into an ARSG clip.
    Encode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gop: usize,
        #[arg(long, default_value_t = 4)]
        block: usize,
        #[arg(long, default_value_t = 8)]
        search: usize,
        #[arg(long, default_value_t = 0.0)]
        quant: f64,
    },
    /// Train an HR branch on the annotated frames of a clip.
    TrainHr {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Train the LR branch and fusion against a frozen HR checkpoint.
    TrainLr {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        hr_ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Segment every frame of a clip and write one label map per frame.
    Infer {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        hr_ckpt: PathBuf,
        #[arg(long)]
        lr_ckpt: PathBuf,
        /// Defaults to the variant stored with the LR checkpoint.
        #[arg(long)]
        fusion: Option<FusionKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-distance mIoU table and cost report.
    Eval {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        hr_ckpt: PathBuf,
        #[arg(long)]
        lr_ckpt: PathBuf,
        #[arg(long)]
        fusion: Option<FusionKind>,
        /// Keyframe interval; defaults to the clip's GOP length.
        #[arg(long)]
        gop: Option<usize>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Bjøntegaard deltas of a test rate curve against an anchor.
    Bd {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Fusion layers for `kind`: the trained ones when the kind matches, fresh
/// ones for parameter-free kinds.
fn select_fusion(trained: Creff, kind: Option<FusionKind>) -> Result<Creff> {
    match kind {
        None => Ok(trained),
        Some(k) if k == trained.config.kind => Ok(trained),
        Some(k @ (FusionKind::WarpOnly | FusionKind::NoFusion)) => {
            let config = arseg::creff::FusionConfig { kind: k, ..trained.config };
            Creff::new(config, trained.channels, 0)
        }
        Some(k) => Err(Error::InvalidArgument(format!(
            "the LR checkpoint was trained with `{}`; `{k}` has no trained weights",
            trained.config.kind
        ))),
    }
}

fn load_models(hr_ckpt: &PathBuf, lr_ckpt: &PathBuf, fusion: Option<FusionKind>) -> Result<(BranchConfig, BranchConfig, Creff)> {
    let hr = model::load_hr(hr_ckpt)?;
    let m = model::load_lr(lr_ckpt, &hr)?;
    let creff = select_fusion(m.creff, fusion)?;
    Ok((hr, m.lr, creff))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Encode { input, out, gop, block, search, quant } => {
            let frames = model::read_frame_dir(&input)?;
            let params = CodecParams {
                gop_length: gop,
                block_size: block,
                search_range: search,
                quant_step: quant,
            };
            let clip = encode_clip(&frames, params)?;
            clip.write_file(&out)?;
            println!("encoded {} frames into {}", clip.frame_count(), out.display());
        }
        Command::TrainHr { clip, labels, config, out, loss_csv } => {
            let job: HrJob = read_json(&config)?;
            let samples = model::labelled_samples(&EncodedClip::read_file(&clip)?, &model::read_label_dir(&labels)?)?;
            let mut hr = BranchConfig::new(1.0, Backbone::new(job.backbone, job.init_seed)?)?;
            let history = train_hr_branch(&mut hr, &samples, &job.train)?;
            if let Some(p) = loss_csv {
                history.write_csv_file(p)?;
            }
            model::save_hr(&hr, &out)?;
            println!("trained on {} frames; epoch losses {:?}", samples.len(), history.epoch_means());
        }
        Command::TrainLr { clip, labels, hr_ckpt, config, out, loss_csv } => {
            let job: LrJob = read_json(&config)?;
            let hr = model::load_hr(&hr_ckpt)?;
            let pairs = model::clip_pairs(&EncodedClip::read_file(&clip)?, &model::read_label_dir(&labels)?)?;
            if pairs.is_empty() {
                return Err(Error::InvalidArgument("no annotated P frames in the clip".into()));
            }
            let creff = model::initial_creff(
                job.fusion,
                hr.backbone.config.feature_channels,
                job.train.seed,
                job.query_key_init,
                job.value_init,
            )?;
            let mut state = LrState::new(hr.clone(), hr.backbone.clone(), job.scale, creff)?;
            let history = train_lr_branch(&mut state, &pairs, &job.train)?;
            if let Some(p) = loss_csv {
                history.write_csv_file(p)?;
            }
            model::save_lr(&state.lr, &state.creff, &out)?;
            println!("trained on {} pairs; epoch losses {:?}", pairs.len(), history.epoch_means());
        }
        Command::Infer { clip, hr_ckpt, lr_ckpt, fusion, out } => {
            let (hr, lr, creff) = load_models(&hr_ckpt, &lr_ckpt, fusion)?;
            let clip = EncodedClip::read_file(&clip)?;
            let seq = run_sequence(&clip, Pipeline { hr: &hr, lr: &lr, creff: &creff })?;
            model::write_label_dir(&out, seq.labels.iter().enumerate())?;
            let total: u64 = seq.flops.iter().sum();
            println!("{} frames, {} FLOPs in total", seq.labels.len(), total);
        }
        Command::Eval { clip, labels, hr_ckpt, lr_ckpt, fusion, gop, report } => {
            let (hr, lr, creff) = load_models(&hr_ckpt, &lr_ckpt, fusion)?;
            let clip = EncodedClip::read_file(&clip)?;
            let annotated = AnnotatedClip {
                frames: decode_clip(&clip)?.frames,
                labels: model::read_label_dir(&labels)?,
            };
            let gop = gop.unwrap_or(clip.params.gop_length);
            let search = MotionSearch {
                block_size: clip.params.block_size,
                search_range: clip.params.search_range,
            };
            let pipe = Pipeline { hr: &hr, lr: &lr, creff: &creff };
            let table = miou_by_distance(std::slice::from_ref(&annotated), pipe, gop, search, IGNORE_INDEX)?;
            let cost = pipe.cost_report(clip.height, clip.width, gop)?;
            write_report(&table, Some(&cost), File::create(&report)?)?;
            println!("overall mIoU {:?}, cost ratio {:.4}", table.overall, cost.ratio);
        }
        Command::Bd { anchor, test } => {
            let a = RateCurve::read_csv(File::open(anchor)?)?;
            let t = RateCurve::read_csv(File::open(test)?)?;
            let r = bd_metrics(&a, &t)?;
            let mut out = io::stdout().lock();
            writeln!(out, "bd_miou,{}", r.bd_miou)?;
            writeln!(out, "bd_flops,{}", r.bd_flops)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
