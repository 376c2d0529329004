use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::info;
use splitinfer_core::attacks::{
    brute_force_attack, brute_force_cost, invert_exact_chain, proxy_recognized, repeated_query_attack,
    toy_brute_force_instance, AttackReport, ChainInverter, InversionMode, Strategy, DEFEATED_RELATIVE_L2,
};
use splitinfer_core::data::{find_mnist_dir, load_mnist_dir, mnist_dir_candidates, synth_blobs, xor, Dataset};
use splitinfer_core::metrics::{drop_sweep_at, min_max_rescale, relative_l2, sweep_csv};
use splitinfer_core::network::{argmax, train_with_progress};
use splitinfer_core::splitexec::{ClientHalf, SplitPlan};
use splitinfer_core::{evaluate, MlpModel};
use splitinfer_wire::frame::{encode_frame, Frame, MsgType, HEADER_LEN, MAGIC, MAX_PAYLOAD, TRAILER_LEN};
use splitinfer_wire::payload::{
    ActivationsPayload, ErrorCode, ErrorPayload, GradRequest, GradResponse, PredictionPayload, ServerInfo,
    PROTOCOL_VERSION,
};
use splitinfer_wire::{activations_payload, serve, Connection, ServerConfig};

use crate::config::{DataSource, ExperimentConfig};
use crate::error::CliError;

/// Metadata keys written by `split`.
pub const META_REAR_FINGERPRINT: &str = "rear_fingerprint";
pub const META_CUT: &str = "cut";

pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Splits, CliError> {
    let (train, test) = match &cfg.data.source {
        DataSource::Mnist { dir } => {
            let dir = match dir {
                Some(d) => d.clone(),
                None => find_mnist_dir().ok_or_else(|| {
                    let looked: Vec<String> = mnist_dir_candidates().iter().map(|p| p.display().to_string()).collect();
                    CliError::DataMissing(looked.join(", "))
                })?,
            };
            let s = load_mnist_dir(&dir)?;
            (s.train, s.test)
        }
        DataSource::Blobs {
            classes,
            per_class,
            dim,
            noise,
            seed,
        } => (
            synth_blobs(*classes, *per_class, *dim, *noise, *seed)?,
            synth_blobs(*classes, *per_class, *dim, *noise, seed.wrapping_add(1))?,
        ),
        DataSource::Xor => (xor(), xor()),
    };
    let limit = |d: Dataset, n: usize| if n == 0 { d } else { d.take(n.min(d.len())) };
    Ok(Splits {
        train: limit(train, cfg.data.train_limit),
        test: limit(test, cfg.data.test_limit),
    })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}", dir.display()), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}

fn load_model(path: &Path) -> Result<MlpModel, CliError> {
    Ok(MlpModel::load(path)?)
}

fn check_input_dim(model: &MlpModel, data: &Dataset) -> Result<(), CliError> {
    if model.input_dim() != data.dim() {
        return Err(CliError::Usage(format!(
            "model expects {} inputs but the dataset has {}",
            model.input_dim(),
            data.dim()
        )));
    }
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let arch = cfg.model.architecture(data.train.dim(), data.train.class_count());
    let model = MlpModel::init(&arch, cfg.model.seed)?;
    let epochs = cfg.train.epochs;
    let outcome = train_with_progress(model, &data.train, &cfg.train, |epoch, loss| {
        info!("epoch {}/{epochs}: loss {loss:.6}", epoch + 1);
    })?;
    let mut model = outcome.model;
    let accuracy = evaluate(&model, &data.test)?;
    model.set_metadata("epochs", epochs.to_string());
    model.set_metadata("test_accuracy", format!("{accuracy:.6}"));
    let path = out.unwrap_or_else(|| cfg.output_dir.join("model.bin"));
    write_file(&path, &model.to_bytes())?;
    let mut curve = String::from("epoch,loss\n");
    for (i, l) in outcome.loss_curve.iter().enumerate() {
        let _ = writeln!(curve, "{},{l:.9}", i + 1);
    }
    let curve_path = path.with_file_name(format!(
        "{}-loss.csv",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("model")
    ));
    write_file(&curve_path, curve.as_bytes())?;
    println!("model: {}", path.display());
    println!("loss curve: {}", curve_path.display());
    println!("test accuracy: {accuracy:.6}");
    Ok(())
}

pub fn evaluate_cmd(cfg: &ExperimentConfig, model: &Path) -> Result<(), CliError> {
    let model = load_model(model)?;
    let data = load_data(cfg)?;
    check_input_dim(&model, &data.test)?;
    println!("test accuracy: {:.6}", evaluate(&model, &data.test)?);
    Ok(())
}

pub fn sweep(cfg: &ExperimentConfig, model: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let model = load_model(model)?;
    let data = load_data(cfg)?;
    check_input_dim(&model, &data.test)?;
    let rows = drop_sweep_at(
        &model,
        &data.test,
        cfg.plan.cut,
        &cfg.sweep.ps,
        cfg.sweep.trials,
        cfg.sweep.seed,
    )?;
    let csv = sweep_csv(&rows);
    let path = out.unwrap_or_else(|| cfg.output_dir.join("sweep.csv"));
    write_file(&path, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

/// Binary PGM; square inputs become square images, anything else one row.
fn pgm(values: &[f64]) -> Vec<u8> {
    let n = values.len();
    let side = (n as f64).sqrt().round() as usize;
    let (w, h) = if side * side == n { (side, side) } else { (n, 1) };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

struct AttackRow {
    sample: usize,
    label: usize,
    report: Option<AttackReport>,
    recognized: Option<bool>,
    detail: String,
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

pub fn attack(cfg: &ExperimentConfig, model_path: &Path, strategy: Strategy, out_dir: Option<PathBuf>) -> Result<(), CliError> {
    let out_dir = out_dir.unwrap_or_else(|| cfg.output_dir.join(format!("attack-{strategy}")));
    if strategy == Strategy::BruteForce {
        return brute_force_demo(cfg, &out_dir);
    }
    let model = load_model(model_path)?;
    let data = load_data(cfg)?;
    check_input_dim(&model, &data.test)?;

    let plan = match strategy {
        Strategy::TwoLayerTranspose => SplitPlan { cut: 2, ..cfg.plan },
        _ => cfg.plan,
    };
    let (front, _) = model.split_at(plan.cut)?;
    let client = ClientHalf::new(front, plan)?.with_query_seed(cfg.query_seed);
    let chain = match strategy {
        Strategy::PseudoInverse => Some(ChainInverter::new(client.front().layers(), InversionMode::PseudoInverse)?),
        Strategy::Transpose | Strategy::TwoLayerTranspose => {
            Some(ChainInverter::new(client.front().layers(), InversionMode::Transpose)?)
        }
        _ => None,
    };

    let n = cfg.attack.samples.min(data.test.len());
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let x = data.test.image(i);
        let label = data.test.label(i);
        let (x_hat, detail) = match strategy {
            Strategy::Exact => {
                let a = client.forward(x)?.activations;
                match invert_exact_chain(&a, client.front().layers()) {
                    Ok(v) => (Some(v), String::new()),
                    Err(e) => (None, e.to_string()),
                }
            }
            Strategy::RepeatedQuery => {
                let r = repeated_query_attack(&client, x, cfg.attack.queries)?;
                let last = r.coverage.last().copied().unwrap_or(0);
                let detail = format!(
                    "coverage {last}/{} after {} queries",
                    r.width,
                    r.queries_to_full.unwrap_or(r.coverage.len())
                );
                (r.x_hat, detail)
            }
            _ => {
                let a = client.forward(x)?.activations;
                let chain = chain.as_ref().expect("inverter built for this strategy");
                (Some(chain.reconstruct(&a)?), String::new())
            }
        };
        let (report, recognized) = match x_hat {
            Some(v) => {
                let recognized = proxy_recognized(&model, &v, label)?;
                (Some(AttackReport::score(strategy, x, v)?), Some(recognized))
            }
            None => (None, None),
        };
        rows.push(AttackRow {
            sample: i,
            label,
            report,
            recognized,
            detail,
        });
    }

    create_dir(&out_dir)?;
    let mut csv = String::from("sample,label,kl,l2,exact,recognized,detail\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.sample,
            r.label,
            fmt_opt(r.report.as_ref().map(|x| format!("{:.9}", x.kl_divergence))),
            fmt_opt(r.report.as_ref().map(|x| format!("{:.9}", x.l2_error))),
            fmt_opt(r.report.as_ref().map(|x| x.succeeded_exact)),
            fmt_opt(r.recognized),
            r.detail.replace(',', ";"),
        );
        if cfg.attack.images {
            let dir = out_dir.join("images");
            write_file(&dir.join(format!("{:04}-original.pgm", r.sample)), &pgm(data.test.image(r.sample)))?;
            if let Some(rep) = &r.report {
                let img = min_max_rescale(&rep.x_hat);
                write_file(&dir.join(format!("{:04}-{strategy}.pgm", r.sample)), &pgm(&img))?;
            }
        }
    }
    write_file(&out_dir.join("report.csv"), csv.as_bytes())?;

    let scored: Vec<&AttackReport> = rows.iter().filter_map(|r| r.report.as_ref()).collect();
    let mean_kl = if scored.is_empty() {
        f64::NAN
    } else {
        scored.iter().map(|r| r.kl_divergence).sum::<f64>() / scored.len() as f64
    };
    let exact = scored.iter().filter(|r| r.succeeded_exact).count();
    let defeated = rows
        .iter()
        .filter(|r| r.report.as_ref().is_none_or(|x| x.l2_error > DEFEATED_RELATIVE_L2))
        .count();
    let recognized = rows.iter().filter(|r| r.recognized == Some(true)).count();
    println!("strategy: {strategy}");
    println!("samples: {n}");
    println!("reconstructed: {}", scored.len());
    println!("mean kl: {mean_kl:.6}");
    println!("exact: {exact}/{n}");
    println!("l2 above {DEFEATED_RELATIVE_L2}: {defeated}/{n}");
    println!("recognized by the model: {recognized}/{n}");
    println!("report: {}", out_dir.join("report.csv").display());

    let mut by_label: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in &rows {
        if let Some(rep) = &r.report {
            let e = by_label.entry(r.label).or_default();
            e.0 += rep.kl_divergence;
            e.1 += 1;
        }
    }
    if !by_label.is_empty() {
        let mut csv = String::from("label,samples,mean_kl\n");
        for (label, (sum, count)) in &by_label {
            let _ = writeln!(csv, "{label},{count},{:.9}", sum / *count as f64);
        }
        write_file(&out_dir.join("by-label.csv"), csv.as_bytes())?;
        print!("{csv}");
    }
    Ok(())
}

/// Summarizes the sweep and attack CSVs found under an output directory.
pub fn report(dir: &Path) -> Result<(), CliError> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| CliError::io(format!("cannot read {}", p.display()), e));
    let sweep_path = dir.join("sweep.csv");
    let mut found = false;
    if sweep_path.is_file() {
        found = true;
        println!("## sweep\n");
        println!("| p | mean | std |");
        println!("|---|---|---|");
        for line in read(&sweep_path)?.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() >= 3 {
                println!("| {} | {} | {} |", f[0], f[1], f[2]);
            }
        }
        println!();
    }
    let mut attacks: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(format!("cannot list {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("report.csv").is_file() && p.join("by-label.csv").is_file())
        .collect();
    attacks.sort();
    if !attacks.is_empty() {
        found = true;
        println!("## attacks\n");
        println!("| run | samples | mean kl | exact |");
        println!("|---|---|---|---|");
    }
    for a in &attacks {
        let text = read(&a.join("report.csv"))?;
        let (mut n, mut kl_sum, mut kl_n, mut exact) = (0usize, 0.0, 0usize, 0usize);
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            n += 1;
            if let Some(Ok(kl)) = f.get(2).map(|v| v.parse::<f64>()) {
                kl_sum += kl;
                kl_n += 1;
            }
            exact += usize::from(f.get(4) == Some(&"true"));
        }
        let name = a.file_name().and_then(|s| s.to_str()).unwrap_or("?");
        let mean = if kl_n == 0 { f64::NAN } else { kl_sum / kl_n as f64 };
        println!("| {name} | {n} | {mean:.4} | {exact}/{n} |");
    }
    if !found {
        return Err(CliError::Usage(format!("no sweep.csv or attack reports under {}", dir.display())));
    }
    Ok(())
}

fn brute_force_demo(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), CliError> {
    let toy = toy_brute_force_instance(6, 8, 1, cfg.attack.grid_points, cfg.attack.seed)?;
    let start = Instant::now();
    let out = brute_force_attack(&toy.a_hat, &toy.layer, &toy.grid)?;
    let elapsed = start.elapsed();
    let l2 = relative_l2(&toy.x, &out.x_hat)?;
    let mut csv = String::from("candidates,dropped,guess,residual,l2\n");
    let _ = writeln!(
        csv,
        "{},{},{},{:.3e},{:.3e}",
        out.candidates,
        out.dropped.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(";"),
        out.guess.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(";"),
        out.residual,
        l2
    );
    write_file(&out_dir.join("report.csv"), csv.as_bytes())?;
    println!("strategy: {}", Strategy::BruteForce);
    println!("toy layer: 6 -> 8 sigmoid, 1 output dropped, {} grid points", toy.grid.len());
    println!("candidates tried: {}", out.candidates);
    println!("relative l2: {l2:.3e}");
    println!("recovered: {}", l2 < splitinfer_core::attacks::EXACT_RELATIVE_L2);
    println!("time: {:.3} ms", elapsed.as_secs_f64() * 1e3);
    let full = brute_force_cost(cfg.attack.grid_points as u64, 4);
    let projected = full.projected_duration(1e9).map_or("beyond Duration".to_string(), |d| format!("{:.3e} s", d.as_secs_f64()));
    println!(
        "same grid, 4 dropped outputs: {} candidates ({projected} at 1e9 candidates/s)",
        full.total_combinations
    );
    Ok(())
}

pub fn split(cfg: &ExperimentConfig, model_path: &Path, out_dir: Option<PathBuf>) -> Result<(), CliError> {
    let model = load_model(model_path)?;
    let (mut front, mut rear) = model.split_at(cfg.plan.cut)?;
    rear.set_metadata(META_CUT, cfg.plan.cut.to_string());
    let rear = rear.quantized();
    let fp = rear.fingerprint();
    front.set_metadata(META_CUT, cfg.plan.cut.to_string());
    front.set_metadata(META_REAR_FINGERPRINT, hex::encode(fp));
    let dir = out_dir.unwrap_or_else(|| cfg.output_dir.clone());
    let (fp_path, rp_path) = (dir.join("front.bin"), dir.join("rear.bin"));
    write_file(&fp_path, &front.to_bytes())?;
    write_file(&rp_path, &rear.to_bytes())?;
    println!("front: {} ({} layers)", fp_path.display(), front.layers().len());
    println!("rear: {} ({} layers)", rp_path.display(), rear.layers().len());
    println!("rear fingerprint: {}", hex::encode(fp));
    Ok(())
}

fn cut_of(model: &MlpModel, fallback: usize) -> Result<u16, CliError> {
    let cut = match model.metadata().get(META_CUT) {
        Some(c) => c
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("model metadata has a bad cut `{c}`")))?,
        None => fallback,
    };
    u16::try_from(cut).map_err(|_| CliError::Usage(format!("cut {cut} does not fit the wire format")))
}

pub fn serve_cmd(cfg: &ExperimentConfig, rear: &Path, addr: Option<String>) -> Result<(), CliError> {
    let rear = load_model(rear)?;
    let cut = cut_of(&rear, cfg.plan.cut)?;
    let config = ServerConfig {
        training: cfg.wire.training.then(|| cfg.train.clone()),
        ..ServerConfig::default()
    };
    let addr = addr.unwrap_or_else(|| cfg.wire.addr.clone());
    let handle = serve(addr.as_str(), rear, cut, config)?;
    println!("listening on {}", handle.local_addr());
    println!("fingerprint: {}", hex::encode(handle.info().fingerprint));
    let _ = std::io::stdout().flush();
    handle.wait();
    Ok(())
}

pub struct QueryArgs {
    pub front: PathBuf,
    pub addr: Option<String>,
    pub index: usize,
    pub count: usize,
    pub bench: bool,
}

pub fn query(cfg: &ExperimentConfig, args: &QueryArgs) -> Result<(), CliError> {
    let front = load_model(&args.front)?;
    let fp_hex = front
        .metadata()
        .get(META_REAR_FINGERPRINT)
        .ok_or_else(|| CliError::Usage(format!("{} was not written by `split`", args.front.display())))?;
    let fp: [u8; 32] = hex::decode(fp_hex)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| CliError::Usage("front model has a malformed rear fingerprint".into()))?;
    let plan = SplitPlan {
        cut: front.layers().len(),
        ..cfg.plan
    };
    let client = ClientHalf::new(front, plan)?.with_query_seed(cfg.query_seed);
    let data = load_data(cfg)?;
    if client.input_dim() != data.test.dim() {
        return Err(CliError::Usage(format!(
            "front expects {} inputs but the dataset has {}",
            client.input_dim(),
            data.test.dim()
        )));
    }
    let addr = args.addr.clone().unwrap_or_else(|| cfg.wire.addr.clone());
    let mut conn = Connection::connect(addr.as_str(), Duration::from_millis(cfg.wire.timeout_ms))?;
    let end = (args.index + args.count).min(data.test.len());
    if args.index >= end {
        return Err(CliError::Usage(format!("sample index {} out of range", args.index)));
    }
    let mut local_times = Vec::new();
    let mut correct = 0;
    for i in args.index..end {
        let x = data.test.image(i);
        let t = Instant::now();
        let payload = activations_payload(&client, x, fp)?;
        local_times.push(t.elapsed());
        let probs = conn.predict(&payload)?;
        let class = argmax(&probs);
        correct += usize::from(class == data.test.label(i));
        println!("sample={i} class={class} label={}", data.test.label(i));
    }
    if end - args.index > 1 {
        println!("accuracy: {:.6}", correct as f64 / (end - args.index) as f64);
    }
    if args.bench {
        let total: Duration = local_times.iter().sum();
        println!(
            "client first-layer latency: {:.3} ms mean over {} queries",
            total.as_secs_f64() * 1e3 / local_times.len() as f64,
            local_times.len()
        );
    }
    Ok(())
}

fn hex_lines(bytes: &[u8]) -> String {
    let mut out = String::new();
    for chunk in bytes.chunks(16) {
        let line: Vec<String> = chunk.iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(out, "    {}", line.join(" "));
    }
    out
}

/// Human-readable description of the wire format with one example frame of
/// every type.
pub fn protocol_dump() -> Result<String, CliError> {
    let mut out = String::new();
    let _ = writeln!(out, "protocol version {PROTOCOL_VERSION}");
    let _ = writeln!(
        out,
        "frame: magic {:?} | type u8 | session u64 LE | len u32 LE | payload | crc32 LE",
        std::str::from_utf8(&MAGIC).unwrap_or("?")
    );
    let _ = writeln!(out, "header {HEADER_LEN} bytes, trailer {TRAILER_LEN} bytes, payload at most {MAX_PAYLOAD} bytes");
    let session = 0x0123_4567_89ab_cdef;
    let info = ServerInfo {
        version: PROTOCOL_VERSION,
        cut: 1,
        width: 4,
        classes: 10,
        fingerprint: [0xAA; 32],
        training: false,
    };
    let examples = [
        (MsgType::Hello, info.encode()),
        (
            MsgType::Activations,
            ActivationsPayload::new(1, vec![0.25, 0.0, 0.5, 1.0], 42, [0xAA; 32]).encode(),
        ),
        (
            MsgType::Prediction,
            PredictionPayload {
                probabilities: vec![0.75, 0.25],
            }
            .encode(),
        ),
        (
            MsgType::GradRequest,
            GradRequest {
                step: 0,
                mask_digest: 7,
                cut: 1,
                rows: 1,
                width: 2,
                labels: vec![3],
                values: vec![0.5, 0.0],
            }
            .encode(),
        ),
        (
            MsgType::GradResponse,
            GradResponse {
                step: 0,
                mask_digest: 7,
                loss: 2.5,
                rows: 1,
                width: 2,
                grad: vec![0.125, -0.5],
            }
            .encode(),
        ),
        (MsgType::Error, ErrorPayload::new(ErrorCode::Width, "expected width 4").encode()),
    ];
    for (t, payload) in examples {
        let frame = encode_frame(&Frame::new(t, session, payload)).map_err(splitinfer_wire::WireError::from)?;
        let _ = writeln!(out, "\n{} (type {}), {} bytes:", t.name(), t as u8, frame.len());
        out.push_str(&hex_lines(&frame));
    }
    let _ = writeln!(out, "\nerror codes:");
    for c in ErrorCode::ALL {
        let _ = writeln!(out, "  {:>2} {}", c as u16, c.name());
    }
    Ok(out)
}
