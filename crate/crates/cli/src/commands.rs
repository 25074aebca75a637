use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use triseg::checkpoint::{Checkpoint, CheckpointError};
use triseg::data::{self, DataError, PhantomSpec, RoiSource, SplitDataset, WINDOW};
use triseg::metrics::{self, MetricsRecord};
use triseg::model::{Geometry, TriChannelNet};
use triseg::optim::OptimizerKind;
use triseg::pnm::Gray;
use triseg::train::{self, EpochReport, TrainConfig, TrainError, EPOCH_CSV_HEADER};

use crate::{
    EvalArgs, Failure, LossArg, OptimizerArg, PredictArgs, ReportArgs, RoiArgs, SynthArgs, TrainArgs,
};

/// Train/test split used by every subcommand that partitions a dataset.
const SPLIT_RATIO: f64 = 0.8;
const THRESHOLD: f32 = 0.5;

type Result<T> = std::result::Result<T, Failure>;

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Failure::Usage(e.to_string()),
            TrainError::EmptyTrainSet | TrainError::Checkpoint(_) => Failure::Data(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn io_fault(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

/// Worker count from `TRISEG_THREADS`, else every available core.
fn threads() -> Result<usize> {
    match std::env::var("TRISEG_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Failure::Usage(format!("TRISEG_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn roi_source(args: &RoiArgs) -> Result<RoiSource> {
    match args.roi.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        ["auto"] => Ok(RoiSource::Auto),
        ["manifest", file] => {
            let text = fs::read_to_string(file).map_err(io_fault(Path::new(file)))?;
            Ok(RoiSource::Manifest(data::parse_manifest(&text)?))
        }
        _ => Err(Failure::Usage(format!("--roi expects `auto` or `manifest FILE`, got {:?}", args.roi.join(" ")))),
    }
}

fn describe_roi(args: &RoiArgs) -> String {
    args.roi.join(":")
}

fn load_split(root: &Path, roi: &RoiSource, seed: u64) -> Result<SplitDataset> {
    let pairs = data::load_dataset(root)?;
    let samples = data::preprocess(&pairs, roi)?;
    Ok(data::split(samples, SPLIT_RATIO, seed)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_fault(path))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_fault(path))?;
            PhantomSpec::parse(&text).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => PhantomSpec::default(),
    };
    let overrides = [
        (&mut spec.axis_min, a.axis_min),
        (&mut spec.axis_max, a.axis_max),
        (&mut spec.contrast, a.contrast),
        (&mut spec.noise, a.noise),
        (&mut spec.texture_scale, a.texture_scale),
    ];
    for (field, v) in overrides {
        if let Some(v) = v {
            *field = v;
        }
    }
    spec.image_size = a.size.unwrap_or(spec.image_size);
    spec.seed = a.seed.unwrap_or(spec.seed);
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    eprintln!(
        "synth: n={} image_size={} axis_min={} axis_max={} contrast={} noise={} texture_scale={} seed={} out={}",
        a.n,
        spec.image_size,
        spec.axis_min,
        spec.axis_max,
        spec.contrast,
        spec.noise,
        spec.texture_scale,
        spec.seed,
        a.out.display()
    );

    let (images, masks) = (a.out.join("images"), a.out.join("masks"));
    for dir in [&images, &masks] {
        fs::create_dir_all(dir).map_err(io_fault(dir))?;
    }
    for i in 0..a.n as usize {
        let pair = data::render_phantom(&spec, i)?.pair;
        write_file(&images.join(format!("{}.pgm", pair.id)), &Gray::from_unit(&pair.image, u16::MAX).encode())?;
        write_file(&masks.join(format!("{}.pgm", pair.id)), &Gray::from_unit(&pair.mask, 255).encode())?;
    }
    eprintln!("synth: wrote {} image/mask pairs", a.n);
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let threads = threads()?;
    let cfg = TrainConfig {
        epochs: a.epochs as usize,
        batch_size: a.batch as usize,
        learning_rate: a.lr,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => OptimizerKind::ADAM,
            OptimizerArg::Sgd => OptimizerKind::SGD,
        },
        seed: a.seed,
        loss: match a.loss {
            LossArg::Bce => triseg::loss::Loss::Bce,
            LossArg::Dice => triseg::loss::Loss::Dice,
        },
        patience: a.patience as usize,
        checkpoint_path: Some(a.out.clone()),
        threads,
        threshold: THRESHOLD,
    };
    cfg.validate()?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".csv");
        PathBuf::from(p)
    });
    eprintln!(
        "train: {} data={} roi={} split={SPLIT_RATIO} threads={threads} out={} log={}",
        cfg.echo().trim_end().replace('\n', " "),
        a.data.display(),
        describe_roi(&a.roi),
        a.out.display(),
        log_path.display()
    );

    let roi = roi_source(&a.roi)?;
    let split = load_split(&a.data, &roi, a.seed)?;
    eprintln!("train: {} train / {} test samples", split.train.len(), split.test.len());
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(Failure::Data(format!("{}: checkpoint directory does not exist", parent.display())));
        }
    }
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_fault(&log_path))?);
    writeln!(log, "{EPOCH_CSV_HEADER}").map_err(io_fault(&log_path))?;

    let mut log_err = None;
    let outcome = train::train(TriChannelNet::build(a.seed), &split, &cfg, &mut |r: &EpochReport| {
        eprintln!("epoch {:>3}  loss {:.5}  test IoU {:.4}  {:.1}s", r.epoch, r.train_loss, r.test_iou, r.seconds);
        if let Err(e) = writeln!(log, "{}", r.csv_line()).and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(io_fault(&log_path)(e));
    }

    let pool = train::thread_pool(threads)?;
    let records = train::evaluate(&outcome.net, &split.test, THRESHOLD, &pool)?;
    let s = metrics::summarize(&records).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!(
        "best epoch {} of {}: test n={} mean IoU {:.4}, median IoU {:.4}, median TPR {:.4}, median PPV {:.4}",
        outcome.best_epoch,
        outcome.reports.len(),
        s.n,
        s.iou.mean,
        s.iou.median,
        s.tpr.median,
        s.ppv.median
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let threads = threads()?;
    let ck = Checkpoint::load(&a.ckpt, Geometry::PRODUCTION)?;
    eprintln!(
        "eval: ckpt={} (epoch {}, seed {}) data={} roi={} split={SPLIT_RATIO} threshold={THRESHOLD} threads={threads}",
        a.ckpt.display(),
        ck.meta.epoch,
        ck.meta.seed,
        a.data.display(),
        describe_roi(&a.roi)
    );
    let roi = roi_source(&a.roi)?;
    let split = load_split(&a.data, &roi, ck.meta.seed)?;
    let pool = train::thread_pool(threads)?;
    let records = train::evaluate(&ck.net, &split.test, THRESHOLD, &pool)?;

    let mut csv = Vec::new();
    metrics::write_csv(&mut csv, &records).expect("writing to memory");
    write_file(&a.out_csv, &csv)?;
    if let Some(dir) = &a.overlays {
        fs::create_dir_all(dir).map_err(io_fault(dir))?;
        for s in &split.test {
            let prob = ck.net.predict(&s.image).map_err(|e| Failure::Runtime(e.to_string()))?;
            let pred = metrics::threshold(&prob, THRESHOLD);
            let overlay =
                metrics::render_overlay(&s.image, &pred, &s.mask).map_err(|e| Failure::Runtime(e.to_string()))?;
            write_file(&dir.join(format!("{}.ppm", s.id)), &overlay.to_ppm())?;
        }
    }
    let summary = metrics::summarize(&records).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{}", summary.to_json());
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt, Geometry::PRODUCTION)?;
    let id = a.image.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
    let image = data::read_pgm(&a.image, &id)?.to_unit();
    let (h, w) = (image.height(), image.width());
    if h < WINDOW || w < WINDOW {
        return Err(Failure::Data(format!("{id}: image is {w}x{h}, smaller than the {WINDOW}x{WINDOW} window")));
    }
    let origin = a.roi_origin.unwrap_or(((h - WINDOW) / 2, (w - WINDOW) / 2));
    if origin.0 + WINDOW > h || origin.1 + WINDOW > w {
        return Err(Failure::Data(format!(
            "{id}: window at ({}, {}) exceeds the {w}x{h} image",
            origin.0, origin.1
        )));
    }
    eprintln!(
        "predict: image={} ckpt={} (seed {}) roi_origin={},{} output={} threshold={THRESHOLD}",
        a.image.display(),
        a.ckpt.display(),
        ck.meta.seed,
        origin.0,
        origin.1,
        if a.prob { "prob16" } else { "mask8" }
    );
    let crop = data::window(&image, origin);
    let prob = ck.net.predict(&crop).map_err(|e| Failure::Runtime(e.to_string()))?;
    let gray = if a.prob {
        Gray::from_unit(&prob, u16::MAX)
    } else {
        Gray::from_unit(&metrics::threshold(&prob, THRESHOLD), 255)
    };
    write_file(&a.out, &gray.encode())
}

pub fn report(a: ReportArgs) -> Result<()> {
    eprintln!("report: csv={} out={}", a.csv.display(), a.out.display());
    let text = fs::read_to_string(&a.csv).map_err(io_fault(&a.csv))?;
    let records: Vec<MetricsRecord> = metrics::parse_csv(&text).map_err(|e| Failure::Data(e.to_string()))?;
    let summary = metrics::summarize(&records).map_err(|e| Failure::Data(format!("{}: {e}", a.csv.display())))?;
    fs::create_dir_all(&a.out).map_err(io_fault(&a.out))?;
    write_file(&a.out.join("summary.json"), format!("{}\n", summary.to_json()).as_bytes())?;
    let table = summary.five_number_table();
    write_file(&a.out.join("five_number.tsv"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}
