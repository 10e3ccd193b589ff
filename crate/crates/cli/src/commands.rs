//! Subcommand definitions and their implementations.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mvfa_core::adacam::cam_reference;
use mvfa_core::datalab::{self, pnm};
use mvfa_core::trainer::{self, format_g9, metrics_csv, MetricsRow};
use mvfa_core::{Mode, Model, Region, SyntheticSpec, Tensor};

use crate::config::{DataSource, RunConfig, TrainOverrides};
use crate::verify;
use crate::{CliError, CliResult};

pub const CONFIG_ECHO: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EVAL_FILE: &str = "eval.csv";
pub const SWEEP_FILE: &str = "sweep_k.csv";
pub const REGIONS_HEADER: &str = "image,rank,confidence,feat_x_tl,feat_y_tl,feat_x_br,feat_y_br,pix_x_tl,pix_y_tl,pix_x_br,pix_y_br";

#[derive(Parser, Debug)]
#[command(name = "mvfa", version, about = "Train and inspect multi-view feature augmentation classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes config.json, metrics.csv and model.ckpt
    Train(TrainArgs),
    /// Validation accuracy and per-image predictions of a checkpoint
    Eval(ModelArgs),
    /// Export the attention map of one image as a P5 graymap
    Heatmap(HeatmapArgs),
    /// Most confident local views of one image, as image-space boxes
    TopkRegions(TopkArgs),
    /// Run the built-in numerical checks
    Verify(VerifyArgs),
    /// Train one model per anchor count and seed
    SweepK(SweepArgs),
    /// Write a synthetic dataset to disk
    GenData(GenDataArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// run config JSON; defaults apply when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// run config JSON, usually the config.json echoed by `train`
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// defaults to <output_dir>/model.ckpt
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// P5/P6 input image
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// ground-truth class, needed for the CAM export
    #[arg(long)]
    pub class: Option<usize>,
    /// also write the class activation map of --class here
    #[arg(long, requires = "class")]
    pub cam: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TopkArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    /// number of views to export
    #[arg(long)]
    pub top: usize,
    /// CSV destination; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// add a bias to the conv1x1 layout so the equivalence check must fail
    #[arg(long, hide = true)]
    pub inject_aux_bias: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// comma-separated anchor counts
    #[arg(long, default_value = "5,10,20,40", value_delimiter = ',')]
    pub ks: Vec<usize>,
    #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// defaults to <output_dir>/sweep_k.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// synthetic spec JSON; defaults apply when omitted
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub image_side: Option<usize>,
    #[arg(long)]
    pub clutter_density: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub val_per_class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Heatmap(a) => heatmap(a),
        Command::TopkRegions(a) => topk_regions(a),
        Command::Verify(a) => verify_cmd(a),
        Command::SweepK(a) => sweep_k(a),
        Command::GenData(a) => gen_data(a),
    }
}

fn resolve(config: Option<&Path>, overrides: &TrainOverrides) -> CliResult<RunConfig> {
    let mut c = RunConfig::load(config)?;
    overrides.apply(&mut c);
    c.validate()?;
    Ok(c)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn progress(tag: &str, row: &MetricsRow) {
    eprintln!(
        "{tag}iter {:>6}  train_loss {}  val_acc {}",
        row.iteration,
        format_g9(row.train_loss),
        format_g9(row.val_acc)
    );
}

fn train(a: TrainArgs) -> CliResult<()> {
    let c = resolve(a.config.as_deref(), &a.overrides)?;
    let (train_set, val_set) = c.load_data()?;
    create_dir(&c.output_dir)?;
    write_file(&c.output_dir.join(CONFIG_ECHO), c.to_json().as_bytes())?;
    let out = trainer::train_with(&c.train, &c.backbone, &train_set, &val_set, |r| progress("", r)).map_err(|e| match e {
        mvfa_core::Error::Config(_) => CliError::from(e),
        e => CliError::runtime(format!("training failed: {e}")),
    })?;
    write_file(&c.output_dir.join(METRICS_FILE), metrics_csv(&out.metrics).as_bytes())?;
    out.model.save(&c.output_dir.join(CHECKPOINT_FILE))?;
    Ok(())
}

fn load_model(a: &ModelArgs) -> CliResult<(RunConfig, Model)> {
    let c = resolve(a.config.as_deref(), &a.overrides)?;
    let path = a.checkpoint.clone().unwrap_or_else(|| c.output_dir.join(CHECKPOINT_FILE));
    let model = Model::load(&c.train, &c.backbone, &path)?;
    Ok((c, model))
}

fn load_image(c: &RunConfig, path: &Path) -> CliResult<Tensor> {
    let img = pnm::read(path)?.to_rgb_tensor();
    let expected = [c.backbone.input_height, c.backbone.input_width, 3];
    if img.shape() != expected {
        return Err(CliError::usage(format!(
            "{}: image is {:?}, model expects {:?}",
            path.display(),
            img.shape(),
            expected
        )));
    }
    Ok(img)
}

fn eval(a: ModelArgs) -> CliResult<()> {
    let (c, model) = load_model(&a)?;
    let (_, val) = c.load_data()?;
    if val.classes() != model.classes() {
        return Err(CliError::usage(format!(
            "checkpoint has {} classes, data has {}",
            model.classes(),
            val.classes()
        )));
    }
    let mut csv = String::from("index,label,predicted\n");
    let mut correct = 0;
    for (i, (img, &label)) in val.images.iter().zip(&val.labels).enumerate() {
        let p = model.predict(img)?.class;
        correct += usize::from(p == label);
        csv.push_str(&format!("{i},{label},{p}\n"));
    }
    create_dir(&c.output_dir)?;
    write_file(&c.output_dir.join(EVAL_FILE), csv.as_bytes())?;
    println!("val_acc {}", format_g9(correct as f64 / val.len() as f64));
    Ok(())
}

fn heatmap(a: HeatmapArgs) -> CliResult<()> {
    let (c, model) = load_model(&a.model)?;
    let img = load_image(&c, &a.image)?;
    let inf = model.infer(&img)?;
    let attention = inf
        .attention
        .ok_or_else(|| CliError::usage(format!("mode {} has no attention branch", model.mode())))?;
    pnm::write(&a.out, &pnm::gray_from_map(&attention)?)?;
    if let (Some(path), Some(class)) = (&a.cam, a.class) {
        if class >= model.classes() {
            return Err(CliError::usage(format!("class {class} out of range for {} classes", model.classes())));
        }
        let w = model.aux_weight().expect("attention implies an aux head");
        pnm::write(path, &pnm::gray_from_map(&cam_reference(&inf.features, w, class)?)?)?;
    }
    Ok(())
}

/// Feature-space box scaled to inclusive image pixels with stride
/// `input / feature` per axis.
pub fn pixel_box(r: &Region, stride_x: usize, stride_y: usize) -> (usize, usize, usize, usize) {
    (
        r.x_tl * stride_x,
        r.y_tl * stride_y,
        (r.x_br + 1) * stride_x - 1,
        (r.y_br + 1) * stride_y - 1,
    )
}

fn topk_regions(a: TopkArgs) -> CliResult<()> {
    let (c, model) = load_model(&a.model)?;
    let img = load_image(&c, &a.image)?;
    let inf = model.infer(&img)?;
    let views = inf.regions.len();
    if views == 0 {
        return Err(CliError::usage(format!("mode {} samples no local views", model.mode())));
    }
    if a.top == 0 || a.top > views {
        return Err(CliError::usage(format!("--top {} outside 1..={views}", a.top)));
    }
    let class = inf.prediction.class;
    let probs = model.head().view_probabilities(&inf.view_scores)?;
    let mut order: Vec<usize> = (0..views).collect();
    order.sort_by(|&i, &j| probs[j][class].total_cmp(&probs[i][class]));

    let (fh, fw) = (inf.features.shape()[0], inf.features.shape()[1]);
    let (sx, sy) = (c.backbone.input_width / fw, c.backbone.input_height / fh);
    let id = a.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut csv = format!("{REGIONS_HEADER}\n");
    for (rank, &v) in order[..a.top].iter().enumerate() {
        let r = &inf.regions[v];
        let (px0, py0, px1, py1) = pixel_box(r, sx, sy);
        csv.push_str(&format!(
            "{id},{},{},{},{},{},{},{px0},{py0},{px1},{py1}\n",
            rank + 1,
            format_g9(probs[v][class]),
            r.x_tl,
            r.y_tl,
            r.x_br,
            r.y_br
        ));
    }
    match &a.out {
        Some(p) => write_file(p, csv.as_bytes()),
        None => std::io::stdout()
            .write_all(csv.as_bytes())
            .map_err(|e| CliError::runtime(e.to_string())),
    }
}

fn verify_cmd(a: VerifyArgs) -> CliResult<()> {
    let report = verify::run_all(a.seed, a.inject_aux_bias);
    print!("{report}");
    if report.passed() {
        println!("all {} checks passed", report.checks.len());
        Ok(())
    } else {
        Err(CliError::verify_failed(format!("failed: {}", report.failures().join("; "))))
    }
}

fn sweep_k(a: SweepArgs) -> CliResult<()> {
    let mut c = resolve(a.config.as_deref(), &a.overrides)?;
    if c.train.mode != Mode::Mfa {
        return Err(CliError::usage(format!("sweep-k needs mode MFA, config has {}", c.train.mode)));
    }
    if a.ks.is_empty() || a.seeds.is_empty() {
        return Err(CliError::usage("--ks and --seeds must be non-empty"));
    }
    for &k in &a.ks {
        c.train.k = k;
        c.validate()?;
    }
    let (train_set, val_set) = c.load_data()?;
    let mut csv = String::from("k,seed,val_acc\n");
    for &k in &a.ks {
        for &seed in &a.seeds {
            c.train.k = k;
            c.train.seed = seed;
            let tag = format!("k={k} seed={seed} ");
            let out = trainer::train_with(&c.train, &c.backbone, &train_set, &val_set, |r| progress(&tag, r))
                .map_err(|e| CliError::runtime(format!("training k={k} seed={seed} failed: {e}")))?;
            let acc = out.metrics.last().map_or(0.0, |r| r.val_acc);
            csv.push_str(&format!("{k},{seed},{}\n", format_g9(acc)));
        }
    }
    let path = a.out.clone().unwrap_or_else(|| c.output_dir.join(SWEEP_FILE));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(&path, csv.as_bytes())
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let mut spec = match &a.spec {
        None => SyntheticSpec::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            // a full run config is accepted too
            match serde_json::from_str::<SyntheticSpec>(&text) {
                Ok(s) => s,
                Err(spec_err) => match RunConfig::from_json(&text) {
                    Ok(RunConfig {
                        data: DataSource::Synthetic(s),
                        ..
                    }) => s,
                    _ => return Err(CliError::usage(format!("{}: invalid synthetic spec: {spec_err}", p.display()))),
                },
            }
        }
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field {
                spec.$field = v;
            }
        )*};
    }
    set!(classes, image_side, clutter_density, noise_std, train_per_class, val_per_class, seed);
    spec.validate()?;
    let manifest = datalab::generate_synthetic(&spec, &a.out)?;
    println!("wrote {} images to {}", manifest.entries.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_box_scaling() {
        let r = Region {
            x_tl: 0,
            y_tl: 0,
            x_br: 2,
            y_br: 2,
        };
        assert_eq!(pixel_box(&r, 4, 4), (0, 0, 11, 11));
        let r = Region {
            x_tl: 13,
            y_tl: 5,
            x_br: 15,
            y_br: 9,
        };
        assert_eq!(pixel_box(&r, 4, 4), (52, 20, 63, 39));
    }

    #[test]
    fn cam_flag_requires_class() {
        let e = Cli::try_parse_from(["mvfa", "heatmap", "--image", "a.ppm", "--out", "b.pgm", "--cam", "c.pgm"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(Cli::try_parse_from(["mvfa", "heatmap", "--image", "a", "--out", "b", "--cam", "c", "--class", "1"]).is_ok());
    }

    #[test]
    fn list_flags_parse() {
        let Cli {
            command: Command::SweepK(s),
        } = Cli::try_parse_from(["mvfa", "sweep-k", "--ks", "1,2", "--iters", "0"]).unwrap()
        else {
            panic!("wrong subcommand")
        };
        assert_eq!(s.ks, vec![1, 2]);
        assert_eq!(s.seeds, vec![0, 1, 2]);
        assert_eq!(s.overrides.iterations, Some(0));
    }
}
