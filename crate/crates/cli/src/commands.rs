use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use gemzsl::data::{self, Checkpoint, ZslDataset};
use gemzsl::gradient_suite;
use gemzsl::metrics::{self, EvalMode, MetricsReport, ScoreTable};
use gemzsl::model::{ModelConfig, Predictor};
use gemzsl::train::{self, EpochLog};

use crate::config::RunConfig;
use crate::output;
use crate::{CliError, Mode};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const TRAIN_LOG_HEADER: &str = "epoch,total,cls,dis,mse,gaze,val_t1,seconds";

fn announce(config: &RunConfig) {
    println!("# resolved config");
    print!("{}", config.to_toml());
    println!("config hash: {:08x}", config.hash());
}

fn load_dataset(path: &Path) -> Result<ZslDataset, CliError> {
    data::load_dataset(path).map_err(|e| CliError::data(format!("dataset {}: {e}", path.display())))
}

/// Loads a checkpoint and checks every tensor against the shapes the dataset implies.
fn load_checkpoint(path: &Path, dataset: &ZslDataset) -> Result<Checkpoint, CliError> {
    let ckpt = data::load_checkpoint(path).map_err(|e| CliError::data(format!("checkpoint {}: {e}", path.display())))?;
    let expected = ModelConfig {
        attributes: dataset.num_attributes(),
        gaze_maps: dataset.gaze.as_ref().map_or(ckpt.model.gaze_maps, |g| g.channels),
        ..ckpt.model.clone()
    };
    ckpt.check_against(&expected)?;
    let enc = &ckpt.model.encoder;
    if enc.input_size != dataset.image_size || enc.word_dim != dataset.word_dim {
        return Err(CliError::data(format!(
            "checkpoint expects images {:?} and word vectors of length {}, the dataset has {:?} and {}",
            enc.input_size, enc.word_dim, dataset.image_size, dataset.word_dim
        )));
    }
    let json = serde_json::to_vec(&(&ckpt.model, &ckpt.train)).expect("checkpoint config serializes");
    println!("config hash: {:08x}", crc32fast::hash(&json));
    Ok(ckpt)
}

pub fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>, force: bool) -> Result<(), CliError> {
    let mut config = RunConfig::load(config)?;
    if let Some(s) = seed {
        config.data.seed = s;
    }
    announce(&config);
    output::prepare_dir(out, force)?;
    let dataset = data::generate_synthetic(&config.data)?;
    data::save_dataset(&dataset, out)?;
    println!(
        "classes: {} ({} seen, {} unseen)",
        dataset.num_classes(),
        dataset.seen_classes.len(),
        dataset.unseen_classes.len()
    );
    println!("attributes: {}", dataset.num_attributes());
    println!(
        "images: {} ({} train, {} test)",
        dataset.num_images(),
        dataset.train_indices.len(),
        dataset.test_indices.len()
    );
    match &dataset.gaze {
        Some(g) => println!("gaze: {} maps on a {}x{} grid", g.channels, g.grid.0, g.grid.1),
        None => println!("gaze: none"),
    }
    println!("images.bin crc32: {:08x}", output::crc_of(&out.join("images.bin"))?);
    if dataset.gaze.is_some() {
        println!("gaze.bin crc32: {:08x}", output::crc_of(&out.join("gaze.bin"))?);
    }
    Ok(())
}

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut csv = String::from(TRAIN_LOG_HEADER);
    csv.push('\n');
    for e in log {
        let val = e.val_t1.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{val},{}",
            e.epoch, e.total, e.cls, e.dis, e.mse, e.gaze, e.seconds
        );
    }
    csv
}

pub fn train(
    data_dir: &Path,
    config: Option<&Path>,
    out: &Path,
    gaze: bool,
    seed: Option<u64>,
    force: bool,
) -> Result<(), CliError> {
    let mut config = RunConfig::load(config)?;
    if gaze {
        config.train.use_gaze = true;
    }
    if let Some(s) = seed {
        config.train.seed = s;
    }
    announce(&config);
    println!("effective lambda_gaze: {}", config.train.effective_lambda_gaze());
    let dataset = load_dataset(data_dir)?;
    train::check_compatible(&dataset, &config.encoder, &config.train)?;
    output::prepare_dir(out, force)?;
    let outcome = train::train(&dataset, &config.encoder, &config.train)?;
    let checkpoint = Checkpoint {
        model: outcome.model,
        train: config.train.clone(),
        epoch: outcome.log.len(),
        params: outcome.params,
    };
    data::save_checkpoint(&checkpoint, out)?;
    output::write(&out.join(TRAIN_LOG), train_log_csv(&outcome.log).as_bytes())?;
    output::write(&out.join(RESOLVED_CONFIG), config.to_toml().as_bytes())?;
    if let Some(last) = outcome.log.last() {
        println!(
            "epoch {}: loss {:.4}, unseen T1 {}",
            last.epoch,
            last.total,
            last.val_t1.map_or("-".into(), |v| format!("{:.2}", 100.0 * v))
        );
    }
    println!("checkpoint crc32: {:08x}", output::crc_of(&out.join("tensors.bin"))?);
    Ok(())
}

/// `lo:hi:step`, inclusive of `hi` up to rounding.
pub fn parse_sweep(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::usage(format!("--gamma-sweep expects lo:hi:step, got `{spec}`"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    let [lo, hi, step] = parts[..] else {
        return Err(bad());
    };
    if !(lo.is_finite() && hi.is_finite() && step > 0.0 && step.is_finite() && lo >= 0.0 && hi >= lo) {
        return Err(bad());
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| lo + i as f64 * step).collect())
}

pub struct EvalArgs<'a> {
    pub data: &'a Path,
    pub ckpt: &'a Path,
    pub mode: Mode,
    pub gamma: Option<f64>,
    pub gamma_sweep: Option<&'a str>,
    pub sigma: Option<f64>,
    pub out: Option<&'a Path>,
    pub json: Option<&'a Path>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{:.2}", 100.0 * v))
}

pub fn eval(args: EvalArgs<'_>) -> Result<(), CliError> {
    let sweep = args.gamma_sweep.map(parse_sweep).transpose()?;
    if sweep.is_some() && args.mode == Mode::Zsl {
        return Err(CliError::usage("--gamma-sweep needs --mode gzsl"));
    }
    if args.mode == Mode::Zsl && args.gamma.is_some() {
        log::warn!("zsl mode scores unseen classes only; --gamma is ignored");
    }
    if args.sigma.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
        return Err(CliError::usage("--sigma must be positive"));
    }
    let dataset = load_dataset(args.data)?;
    let ckpt = load_checkpoint(args.ckpt, &dataset)?;
    let sigma = args.sigma.unwrap_or_else(|| ckpt.params.sigma(&ckpt.model));
    let gamma = args.gamma.unwrap_or(ckpt.train.gamma);

    let reports: Vec<MetricsReport> = match (args.mode, sweep) {
        (Mode::Zsl, _) => {
            vec![metrics::evaluate(&dataset, &ckpt.params, &ckpt.model, EvalMode::Zsl, sigma, 0.0)?]
        }
        (Mode::Gzsl, None) => {
            vec![metrics::evaluate(&dataset, &ckpt.params, &ckpt.model, EvalMode::Gzsl, sigma, gamma)?]
        }
        (Mode::Gzsl, Some(gammas)) => {
            ScoreTable::build_for(&dataset, &ckpt.params, &ckpt.model, &dataset.test_indices, sigma)?
                .sweep(&dataset, &gammas)?
        }
    };
    let reports: Vec<MetricsReport> = reports
        .into_iter()
        .map(|r| MetricsReport {
            seed: Some(ckpt.train.seed),
            ..r
        })
        .collect();

    for r in &reports {
        match r.mode {
            EvalMode::Zsl => println!("T1 = {}", pct(r.t1)),
            EvalMode::Gzsl => println!(
                "gamma = {}: S = {}, U = {}, H = {}, seen-predicted = {}/{}",
                r.gamma,
                pct(r.seen),
                pct(r.unseen),
                pct(r.harmonic),
                r.seen_predicted,
                r.samples
            ),
        }
    }
    let csv = metrics::to_csv(&reports);
    match args.out {
        Some(path) => output::write(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    if let Some(path) = args.json {
        let json = if reports.len() == 1 {
            serde_json::to_vec_pretty(&reports[0])
        } else {
            serde_json::to_vec_pretty(&reports)
        }
        .expect("report serializes");
        output::write(path, &json)?;
    }
    Ok(())
}

pub fn gaze_eval(data_dir: &Path, ckpt: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let dataset = load_dataset(data_dir)?;
    if dataset.gaze.is_none() {
        return Err(CliError::data(
            "the dataset has no gaze ground truth; regenerate it with `data.with_gaze = true`",
        ));
    }
    let ckpt = load_checkpoint(ckpt, &dataset)?;
    let sigma = ckpt.params.sigma(&ckpt.model);
    let report = metrics::evaluate(&dataset, &ckpt.params, &ckpt.model, EvalMode::Zsl, sigma, 0.0)?;
    let report = MetricsReport {
        seed: Some(ckpt.train.seed),
        ..report
    };
    let (Some(auc), Some(nss)) = (report.auc, report.nss) else {
        return Err(CliError::data("no unseen test image has fixations to score"));
    };
    println!("channel,auc,nss,images");
    for ch in &report.gaze_channels {
        println!("{},{:.4},{:.4},{}", ch.channel, ch.auc, ch.nss, ch.images);
    }
    println!("mean,{auc:.4},{nss:.4},{}", report.unseen_samples);
    if let Some(path) = out {
        output::write(path, metrics::to_csv(&[report]).as_bytes())?;
    }
    Ok(())
}

pub fn viz(data_dir: &Path, ckpt: &Path, image: usize, out: &Path, force: bool) -> Result<(), CliError> {
    let dataset = load_dataset(data_dir)?;
    if image >= dataset.num_images() {
        return Err(CliError::usage(format!(
            "--image {image} is out of range; the dataset has {} images",
            dataset.num_images()
        )));
    }
    let ckpt = load_checkpoint(ckpt, &dataset)?;
    let words = dataset.word_vectors()?;
    let predictor = Predictor::new(&ckpt.params, &ckpt.model, &words)?;
    let inference = predictor.infer(&dataset.image_tensor(image))?;
    output::prepare_dir(out, force)?;

    let write_maps = |prefix: &str, maps: &gemzsl::autodiff::Tensor| -> Result<usize, CliError> {
        let shape = maps.shape();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        for ch in 0..c {
            let plane: Vec<f64> = (0..h * w).map(|cell| maps.data()[cell * c + ch]).collect();
            output::write(&out.join(format!("{prefix}_{ch:02}.pgm")), &output::pgm(&plane, h, w))?;
        }
        Ok(c)
    };
    let k = write_maps("attention", inference.attention.tensor())?;
    let d = write_maps("gaze", inference.gaze.tensor())?;

    let mut csv = String::from("attribute,name,score\n");
    for (i, score) in inference.attribute_scores.iter().enumerate() {
        let _ = writeln!(csv, "{i},{},{score}", dataset.attribute_names[i]);
    }
    output::write(&out.join("attribute_scores.csv"), csv.as_bytes())?;
    println!(
        "image {image} (class {}): wrote {k} attention maps, {d} gaze maps and attribute_scores.csv to {}",
        dataset.class_names[dataset.labels[image]],
        out.display()
    );
    Ok(())
}

pub fn gradcheck(corrupt: bool) -> Result<(), CliError> {
    let model = gradient_suite::suite_model();
    let json = serde_json::to_vec(&model).expect("model config serializes");
    println!("config hash: {:08x}", crc32fast::hash(&json));
    let start = Instant::now();
    let rows = gradient_suite::run(corrupt)?;
    println!("loss,max_rel_error,checked,excluded,seconds,result");
    let mut failed = 0;
    for row in &rows {
        let ok = row.passed();
        failed += usize::from(!ok);
        println!(
            "{},{:.3e},{},{},{:.3},{}",
            row.loss,
            row.report.max_rel_error,
            row.report.checked,
            row.report.excluded,
            row.elapsed.as_secs_f64(),
            if ok { "pass" } else { "FAIL" }
        );
    }
    println!(
        "tolerance {:e}, total {:.2} s",
        gradient_suite::TOLERANCE,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(CliError::numerical(format!("{failed} of {} gradient checks failed", rows.len())));
    }
    Ok(())
}
