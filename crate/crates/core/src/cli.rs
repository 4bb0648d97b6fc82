//! The `udma` command line.
//!
//! Exit status: 0 on success, 1 for usage and validation errors (bad flags,
//! config or input files), 2 for runtime and numeric failures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{load_config, RunConfig};
use crate::dataio::{read_labels, read_scan, read_source, write_labels, write_scan, write_source, ClassTaxonomy, LabelMap, PointCloud};
use crate::evaluation::{ConfusionMatrix, IouReport};
use crate::gradcheck::check_all;
use crate::model::ModelConfig;
use crate::preseg::{presegment, ComponentCategory, ComponentMap, GroundModel};
use crate::projection::{build_range_image, RangeImage};
use crate::synth::{generate_scan, generate_source, BeamModel, DomainShift, SceneFamily};
use crate::training::{SourceExample, TargetExample, Trainer};

#[derive(Debug, Parser)]
#[command(name = "udma", version, about = "Label-free LiDAR segmentation by cross-modal adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic labelled scans (and optionally shifted source samples).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write source samples `source_NNNN.img` / `.label`.
        #[arg(long)]
        source: bool,
        /// Scale of the source's second range channel.
        #[arg(long, default_value_t = 2.0)]
        shift_scale: f64,
        /// Offset of the source's second range channel (meters).
        #[arg(long, default_value_t = 10.0)]
        shift_offset: f64,
        #[arg(long, default_value_t = 50.0)]
        max_range: f64,
    },
    /// Ground fit, clustering and prior categories for one scan.
    Preseg {
        #[arg(long)]
        scan: PathBuf,
        /// Components file (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Spherical projection of a scan into a range image.
    Project {
        #[arg(long)]
        scan: PathBuf,
        /// Components file from `preseg`.
        #[arg(long)]
        components: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a grayscale range preview (binary PGM).
        #[arg(long)]
        png: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Adversarial training followed by fine-tuning.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Line-delimited JSON metrics.
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Per-class IoU and mIoU.
    Eval {
        /// Ground-truth label file.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Predicted label file.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Predict with this checkpoint instead of reading `--pred`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scans to predict (with `--checkpoint`); labels are read from the
        /// sibling `.label` file.
        #[arg(long)]
        scan: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of every loss through the full model.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 8)]
        size: usize,
        /// Coordinates probed per parameter tensor.
        #[arg(long, default_value_t = 2)]
        per_tensor: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Render a range image channel as a grayscale PGM.
    Viz {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Channel::Range)]
        channel: Channel,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Channel {
    Range,
    Intensity,
    Valid,
    Component,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

/// Run with `argv` (including the program name) and return the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Validation(m) => eprintln!("error: {m}"),
                CliError::Runtime(m) => eprintln!("runtime error: {m}"),
            }
            e.code()
        }
    }
}

fn config_or_default(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p).map_err(invalid),
        None => Ok(RunConfig::default()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            out,
            count,
            config,
            source,
            shift_scale,
            shift_offset,
            max_range,
        } => synth(&out, count, config.as_deref(), source, shift_scale, shift_offset, max_range),
        Command::Preseg { scan, out, config } => preseg(&scan, &out, config.as_deref()),
        Command::Project {
            scan,
            components,
            out,
            png,
            config,
        } => project(&scan, components.as_deref(), &out, png.as_deref(), config.as_deref()),
        Command::Train { config, out, metrics } => train(&config, &out, &metrics),
        Command::Eval {
            truth,
            pred,
            checkpoint,
            scan,
            config,
            json,
        } => eval(truth.as_deref(), pred.as_deref(), checkpoint.as_deref(), &scan, config.as_deref(), json),
        Command::Gradcheck {
            seeds,
            size,
            per_tensor,
            step,
            tol,
        } => gradcheck(seeds, size, per_tensor, step, tol),
        Command::Viz { image, out, channel } => viz(&image, &out, channel),
    }
}

// ---- synth ----------------------------------------------------------------------

fn synth(out: &Path, count: usize, config: Option<&Path>, source: bool, scale: f64, offset: f64, max_range: f64) -> Result<()> {
    let cfg = config_or_default(config)?;
    if !(max_range > 0.0) {
        return Err(invalid("--max-range must be > 0"));
    }
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let proj = cfg.projection();
    let family = SceneFamily {
        beams: BeamModel {
            rings: proj.height,
            azimuths: proj.width,
            fov_up: proj.fov_up,
            fov_down: proj.fov_down,
            max_range,
        },
        ..SceneFamily::default()
    };
    let map = LabelMap::semantic_kitti();
    for i in 0..count {
        let seed = cfg.seed.wrapping_add(i as u64);
        let spec = family.sample(seed);
        let scan = generate_scan(&spec, seed).map_err(invalid)?;
        let stem = out.join(format!("scan_{i:04}"));
        write_scan(stem.with_extension("bin"), &scan.cloud).map_err(runtime)?;
        write_labels(stem.with_extension("label"), scan.cloud.labels.as_deref().unwrap_or(&[]), &map).map_err(runtime)?;
        if source {
            let mut spec = family.sample(seed ^ 0x5005_CE00);
            spec.shift = DomainShift {
                scale: [1.0, scale, 1.0],
                offset: [0.0, offset, 0.0],
            };
            let s = generate_source(&spec, seed).map_err(invalid)?;
            let stem = out.join(format!("source_{i:04}"));
            write_source(stem.with_extension("img"), stem.with_extension("label"), &s, &map).map_err(runtime)?;
        }
    }
    println!("wrote {count} scan(s) to {}", out.display());
    Ok(())
}

// ---- preseg / project -----------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct ComponentFile {
    ground: GroundModel,
    ground_component: Option<usize>,
    categories: Vec<ComponentCategory>,
    component_id: Vec<i64>,
}

fn preseg(scan: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = config_or_default(config)?;
    let cloud = read_scan(scan).map_err(invalid)?;
    let (ground, map) = presegment(&cloud, &cfg.preseg()).map_err(runtime)?;
    let file = ComponentFile {
        ground,
        ground_component: map.ground_component,
        categories: map.categories.clone(),
        component_id: map.component_id.clone(),
    };
    write_file(out, serde_json::to_string(&file).expect("serialize").as_bytes())?;
    print!("{}", map.describe());
    Ok(())
}

fn read_components(path: &Path, cloud: &PointCloud) -> Result<ComponentMap> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let f: ComponentFile = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    if f.component_id.len() != cloud.len() {
        return Err(invalid(format!(
            "{}: {} component ids for {} points",
            path.display(),
            f.component_id.len(),
            cloud.len()
        )));
    }
    let mut map = ComponentMap::from_assignment(cloud, f.component_id, f.ground_component, Some(&f.ground));
    if f.categories.len() != map.num_components() {
        return Err(invalid(format!("{}: category count does not match components", path.display())));
    }
    map.categories = f.categories;
    Ok(map)
}

fn project(scan: &Path, components: Option<&Path>, out: &Path, png: Option<&Path>, config: Option<&Path>) -> Result<()> {
    let cfg = config_or_default(config)?;
    let cloud = read_scan(scan).map_err(invalid)?;
    let map = components.map(|p| read_components(p, &cloud)).transpose()?;
    let img = build_range_image(&cloud, map.as_ref(), &cfg.projection());
    write_file(out, &img.encode())?;
    if let Some(p) = png {
        write_file(p, &render_pgm(&img, Channel::Range))?;
    }
    println!("{}x{} range image, {} valid pixels", img.width, img.height, img.valid_count());
    Ok(())
}

// ---- viz ---------------------------------------------------------------------------

/// Binary PGM (`P5`), `U` columns by `V` rows.
fn render_pgm(img: &RangeImage, channel: Channel) -> Vec<u8> {
    let values: Vec<f64> = match channel {
        Channel::Range => img.range.iter().zip(&img.valid).map(|(&r, &v)| if v { r } else { 0.0 }).collect(),
        Channel::Intensity => img.intensity.clone(),
        Channel::Valid => img.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        // spread ids over the gray range
        Channel::Component => img
            .component_id
            .iter()
            .map(|&c| if c < 0 { 0.0 } else { 1.0 + ((c as u64 * 37) % 255) as f64 })
            .collect(),
    };
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(values.iter().map(|&v| if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 }));
    out
}

fn viz(image: &Path, out: &Path, channel: Channel) -> Result<()> {
    let bytes = fs::read(image).map_err(|e| invalid(format!("{}: {e}", image.display())))?;
    let img = RangeImage::decode(&bytes).map_err(invalid)?;
    write_file(out, &render_pgm(&img, channel))?;
    println!("wrote {}x{} image to {}", img.width, img.height, out.display());
    Ok(())
}

// ---- train ------------------------------------------------------------------------------

fn list(dir: &Path, prefix: &str, ext: &str) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))?;
    let mut v: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().and_then(|x| x.to_str()) == Some(ext)
                && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(prefix))
        })
        .collect();
    v.sort();
    Ok(v)
}

fn load_target(path: &Path, cfg: &RunConfig) -> Result<(TargetExample, RangeImage, PointCloud)> {
    let cloud = read_scan(path).map_err(invalid)?;
    let (_, map) = presegment(&cloud, &cfg.preseg()).map_err(runtime)?;
    let img = build_range_image(&cloud, Some(&map), &cfg.projection());
    Ok((TargetExample::new(&img, &map, cfg.range_scale), img, cloud))
}

fn train(config: &Path, out: &Path, metrics: &Path) -> Result<()> {
    let cfg = load_config(config).map_err(invalid)?;
    if cfg.source_dir.is_empty() || cfg.target_dir.is_empty() {
        return Err(invalid("config must set source_dir and target_dir"));
    }
    if cfg.range_width % 4 != 0 || cfg.range_height % 4 != 0 {
        return Err(invalid("range_width and range_height must be multiples of 4 for training"));
    }
    let tax = ClassTaxonomy::standard();
    let map = LabelMap::semantic_kitti();
    let mut source = Vec::new();
    for img in list(Path::new(&cfg.source_dir), "source_", "img")? {
        let s = read_source(&img, img.with_extension("label"), &map).map_err(invalid)?;
        if s.height != cfg.range_height || s.width != cfg.range_width {
            return Err(invalid(format!("{}: {}x{} does not match the configured range image", img.display(), s.height, s.width)));
        }
        source.push(SourceExample::new(&s, &tax, cfg.range_scale));
    }
    let mut target = Vec::new();
    for scan in list(Path::new(&cfg.target_dir), "scan_", "bin")? {
        target.push(load_target(&scan, &cfg)?.0);
    }
    if source.is_empty() || target.is_empty() {
        return Err(invalid(format!("found {} source samples and {} target scans", source.len(), target.len())));
    }
    let mut trainer = Trainer::new(cfg.model(), cfg.train());
    let mut log = fs::File::create(metrics).map_err(|e| runtime(format!("{}: {e}", metrics.display())))?;
    for step in 0..cfg.train_steps {
        let m = trainer
            .train_step(&source[step % source.len()], &target[step % target.len()])
            .map_err(runtime)?;
        writeln!(log, "{}", m.to_json()).map_err(runtime)?;
    }
    for step in 0..cfg.fine_tune_steps {
        let m = trainer.fine_tune_step(&target[step % target.len()]).map_err(runtime)?;
        writeln!(log, "{}", m.to_json()).map_err(runtime)?;
    }
    let mut buf = Vec::new();
    trainer.save(&mut buf).map_err(runtime)?;
    write_file(out, &buf)?;
    println!(
        "trained {} + {} steps on {} source / {} target; checkpoint {}",
        cfg.train_steps,
        cfg.fine_tune_steps,
        source.len(),
        target.len(),
        out.display()
    );
    Ok(())
}

// ---- eval ----------------------------------------------------------------------------------

fn read_label_file(path: &Path, map: &LabelMap) -> Result<Vec<usize>> {
    let n = fs::metadata(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?.len() as usize / 4;
    read_labels(path, n, map).map_err(invalid)
}

fn eval(truth: Option<&Path>, pred: Option<&Path>, checkpoint: Option<&Path>, scans: &[PathBuf], config: Option<&Path>, json: bool) -> Result<()> {
    let tax = ClassTaxonomy::standard();
    let map = LabelMap::semantic_kitti();
    let mut cm = ConfusionMatrix::for_taxonomy(&tax);
    match (truth, pred, checkpoint) {
        (Some(t), Some(p), None) => {
            let t = read_label_file(t, &map)?;
            let p = read_label_file(p, &map)?;
            cm.accumulate(&t, &p).map_err(invalid)?;
        }
        (None, None, Some(ckpt)) if !scans.is_empty() => {
            let cfg = config_or_default(config)?;
            let mut trainer = Trainer::new(cfg.model(), cfg.train());
            let bytes = fs::read(ckpt).map_err(|e| invalid(format!("{}: {e}", ckpt.display())))?;
            trainer.load(&bytes[..]).map_err(invalid)?;
            for scan in scans {
                let (example, img, cloud) = load_target(scan, &cfg)?;
                let truth = read_labels(scan.with_extension("label"), cloud.len(), &map).map_err(invalid)?;
                let pred = trainer.predict_points(&example, &img, &cloud, &cfg.projection()).map_err(runtime)?;
                cm.accumulate(&truth, &pred).map_err(invalid)?;
            }
        }
        _ => return Err(invalid("use either --truth and --pred, or --checkpoint with one or more --scan")),
    }
    let report = cm.miou().map_err(runtime)?;
    print_report(&tax, &report, json);
    Ok(())
}

fn print_report(tax: &ClassTaxonomy, r: &IouReport, json: bool) {
    if json {
        let classes: serde_json::Map<String, serde_json::Value> = r
            .per_class
            .iter()
            .enumerate()
            .map(|(c, v)| (tax.class_name(c).to_string(), serde_json::json!(v)))
            .collect();
        let absent: Vec<&str> = r.absent().iter().map(|&c| tax.class_name(c)).collect();
        println!("{}", serde_json::json!({ "miou": r.miou, "iou": classes, "absent": absent }));
        return;
    }
    println!("{:<12} {:>8}", "class", "IoU");
    for (c, v) in r.per_class.iter().enumerate() {
        match v {
            Some(v) => println!("{:<12} {:>8.4}", tax.class_name(c), v),
            None => println!("{:<12} {:>8}", tax.class_name(c), "absent"),
        }
    }
    println!("{:<12} {:>8.4}", "mIoU", r.miou);
    let absent = r.absent();
    if !absent.is_empty() {
        let names: Vec<&str> = absent.iter().map(|&c| tax.class_name(c)).collect();
        println!("excluded from mean: {}", names.join(", "));
    }
}

// ---- gradcheck -------------------------------------------------------------------------------

fn gradcheck(seeds: u64, size: usize, per_tensor: usize, step: f64, tol: f64) -> Result<()> {
    if size == 0 || size % 4 != 0 {
        return Err(invalid("--size must be a positive multiple of 4"));
    }
    let mut worst = [0.0f64; 4];
    let mut names = [""; 4];
    let mut checked = [0usize; 4];
    for seed in 0..seeds {
        let checks = check_all(seed, size, ModelConfig::default(), per_tensor, step, tol).map_err(runtime)?;
        for (i, c) in checks.iter().enumerate() {
            names[i] = c.loss;
            worst[i] = worst[i].max(c.report.max_rel_error);
            checked[i] += c.report.checked;
        }
    }
    let mut ok = true;
    for i in 0..4 {
        let pass = worst[i] <= tol && checked[i] > 0;
        ok &= pass;
        println!(
            "{:<14} max rel error {:.3e} over {} coordinates  {}",
            names[i],
            worst[i],
            checked[i],
            if pass { "ok" } else { "FAIL" }
        );
    }
    if ok {
        Ok(())
    } else {
        Err(runtime(format!("gradient check exceeded tolerance {tol:e}")))
    }
}
