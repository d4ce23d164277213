use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde_json::json;

use flownas_core::arch::{parse_arch, serialize_arch, Architecture, BnAccounting, HwThresholds};
use flownas_core::engine::{evaluate, multi_start_train, read_weights, write_weights, Metrics, ModelWeights};
use flownas_core::pcap::{decode_packet, read_capture};
use flownas_core::quant::{calibrate, compare, QuantConfig};
use flownas_core::report::EstimateReport;
use flownas_core::search::{
    curve_csv, export_curve, load_checkpoint, run_search, RunOptions, SearchState, TrainerEvaluator,
};
use flownas_core::session::{
    apply_strategy, assemble_sessions, filter_packets, normalize_session, read_dataset, write_dataset,
    AnonymizationMap, Dataset, PreprocStrategy,
};
use flownas_core::synth::toy_dataset;

use crate::config::{RunConfig, ToyConfig};
use crate::labels::LabelMap;
use crate::{CliError, DataArgs, EstimateArgs, EvalArgs, PreprocessArgs, QuantizeArgs, RunArgs, SearchArgs, TrainArgs};

const CHECKPOINT_FILE: &str = "search_checkpoint.json";
const LOG_FILE: &str = "search_log.jsonl";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) if p.extension().is_some_and(|e| e == "json") => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", p.display())))?;
            let cfg = v
                .get("config")
                .cloned()
                .ok_or_else(|| CliError::Config(format!("{} has no `config` entry", p.display())))?;
            let mut cfg: RunConfig =
                serde_json::from_value(cfg).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            if let Ok(v) = std::env::var(crate::config::SEED_ENV) {
                cfg.seed = v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("FLOWNAS_SEED={v:?} is not an unsigned integer")))?;
            }
            Ok(cfg)
        }
        p => RunConfig::load(p),
    }
}

fn resolve(run: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = load_config(run.config.as_deref())?;
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(o) = &run.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn write_manifest(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let manifest = json!({
        "tool": "flownas",
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": flownas_core::VERSION,
        "command": command,
        "seed": cfg.seed,
        "config": cfg,
    });
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Internal(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_dataset_file(path: &Path) -> Result<Dataset, CliError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    read_dataset(BufReader::new(f)).map_err(|e| match CliError::from(e) {
        CliError::Parse(m) => CliError::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn read_arch_file(path: &Path) -> Result<Architecture, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_arch(&text, true).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

fn model_arch(model: &Path, arch: Option<&Path>) -> Result<Architecture, CliError> {
    match arch {
        Some(p) => read_arch_file(p),
        None => read_arch_file(&model.with_extension("arch")),
    }
}

fn read_model(arch: &Architecture, path: &Path) -> Result<ModelWeights, CliError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(read_weights(arch, BufReader::new(f))?)
}

fn check_dims(arch: &Architecture, data: &Dataset) -> Result<(), CliError> {
    if arch.input_len != data.input_len {
        return Err(CliError::Config(format!(
            "dimension mismatch: dataset input length {} but architecture input length {}",
            data.input_len, arch.input_len
        )));
    }
    if (data.n_classes as usize) > arch.n_classes {
        return Err(CliError::Config(format!(
            "dimension mismatch: dataset has {} classes but architecture outputs {}",
            data.n_classes, arch.n_classes
        )));
    }
    Ok(())
}

/// Resolves the dataset source into `cfg` (so the manifest can replay it) and loads it.
fn load_data(cfg: &mut RunConfig, d: &DataArgs) -> Result<Dataset, CliError> {
    if let Some(l) = d.length {
        cfg.data.input_len = l;
    }
    if let Some(p) = &d.dataset {
        cfg.data.dataset = Some(p.clone());
        cfg.data.toy = None;
    }
    if d.toy {
        let mut toy = cfg.data.toy.clone().unwrap_or_default();
        if let Some(k) = d.toy_classes {
            toy.classes = k;
        }
        if let Some(n) = d.toy_samples {
            toy.samples = n;
        }
        cfg.data.toy = Some(toy);
        cfg.data.dataset = None;
    }
    cfg.validate()?;
    match (&cfg.data.dataset, &cfg.data.toy) {
        (Some(p), _) => read_dataset_file(p),
        (None, Some(t)) => Ok(toy_dataset(t.classes, t.samples, cfg.data.input_len, cfg.seed)),
        (None, None) => Err(CliError::Config("no dataset: pass --dataset or --toy".into())),
    }
}

fn histogram_text(data: &Dataset, names: Option<&[String]>) -> String {
    let mut s = String::from("class samples\n");
    for (c, n) in data.class_histogram().iter().enumerate() {
        let name = names.and_then(|v| v.get(c)).cloned().unwrap_or_else(|| c.to_string());
        s.push_str(&format!("{name} {n}\n"));
    }
    s
}

fn capture_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| io_err(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == "pcap" || x == "cap") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

pub fn preprocess(a: PreprocessArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&a.run)?;
    if let Some(s) = a.strategy {
        cfg.data.strategy = s;
    }
    if let Some(l) = a.length {
        cfg.data.input_len = l;
    }
    if let Some(p) = &a.pcap_dir {
        cfg.data.pcap_dir = Some(p.clone());
    }
    if let Some(p) = &a.labels {
        cfg.data.label_map = Some(p.clone());
    }
    if a.toy {
        cfg.data.toy = Some(cfg.data.toy.clone().unwrap_or_else(ToyConfig::default));
    }
    cfg.validate()?;
    let output = a.output.clone().unwrap_or_else(|| cfg.output_dir.join("dataset.sess"));
    let len = cfg.data.input_len;

    let (data, names) = if let Some(t) = cfg.data.toy.as_ref().filter(|_| a.toy) {
        (toy_dataset(t.classes, t.samples, len, cfg.seed), None)
    } else {
        let dir = cfg
            .data
            .pcap_dir
            .clone()
            .ok_or_else(|| CliError::Config("preprocess needs --pcap-dir (or --toy)".into()))?;
        let map_path = cfg
            .data
            .label_map
            .clone()
            .ok_or_else(|| CliError::Config("preprocess needs --labels".into()))?;
        let map_text = fs::read_to_string(&map_path).map_err(|e| io_err(&map_path, e))?;
        let labels = LabelMap::parse(&map_text)?;
        let files = capture_files(&dir)?;
        if files.is_empty() {
            return Err(CliError::Io(format!("no captures found in {}", dir.display())));
        }
        let strategy = PreprocStrategy::from_id(cfg.data.strategy)?;
        let anon = AnonymizationMap::from_seed(cfg.seed);
        let mut samples = Vec::new();
        let mut malformed = 0usize;
        for f in &files {
            let name = f
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let Some(label) = labels.label(&name) else {
                eprintln!("warning: {name} matches no label rule; skipped");
                continue;
            };
            let bytes = fs::read(f).map_err(|e| io_err(f, e))?;
            let frames = read_capture(&bytes).map_err(|e| CliError::Parse(format!("{}: {e}", f.display())))?;
            let packets = frames.into_iter().filter_map(|fr| match decode_packet(fr) {
                Ok(d) => d.into_packet(),
                Err(_) => {
                    malformed += 1;
                    None
                }
            });
            for (_, pkts) in assemble_sessions(packets).into_ordered() {
                let pkts = filter_packets(pkts);
                if pkts.is_empty() {
                    continue;
                }
                let rewritten = apply_strategy(&pkts, &strategy, &anon)?;
                samples.push(normalize_session(&rewritten, len, label)?);
            }
        }
        if malformed > 0 {
            eprintln!("warning: {malformed} malformed frames skipped");
        }
        let data = Dataset::new(len, labels.classes.len() as u16, samples)?;
        (data, Some(labels.classes))
    };

    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let f = File::create(&output).map_err(|e| io_err(&output, e))?;
    write_dataset(&data, BufWriter::new(f))?;
    if let Some(names) = &names {
        write_text(&cfg.output_dir.join("classes.txt"), &(names.join("\n") + "\n"))?;
    }
    write_manifest(&cfg, "preprocess")?;
    println!("wrote {} sessions of {} bytes to {}", data.len(), len, output.display());
    print!("{}", histogram_text(&data, names.as_deref()));
    Ok(())
}

pub fn estimate(a: EstimateArgs) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let mut arch = match &a.arch {
        Some(p) => read_arch_file(p)?,
        None => Architecture {
            n_classes: a.classes,
            ..Architecture::reference(a.length.unwrap_or(cfg.data.input_len))
        },
    };
    if let Some(l) = a.length {
        arch = arch.with_input_len(l);
    }
    let th = HwThresholds {
        params: a.max_params.unwrap_or(cfg.thresholds.params),
        max_tensor: a.max_tensor.unwrap_or(cfg.thresholds.max_tensor),
        flops: a.max_flops.unwrap_or(cfg.thresholds.flops),
    };
    th.validate().map_err(CliError::Config)?;
    let bn = if a.bn_trainable_only {
        BnAccounting::Trainable
    } else {
        cfg.bn_accounting
    };
    let report = EstimateReport::new(&arch, &th, bn).map_err(|e| CliError::Config(e.to_string()))?;
    if a.csv {
        print!("{}", report.to_csv());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

pub fn search(a: SearchArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&a.run)?;
    if let Some(g) = a.generations {
        cfg.search.n_generations = g;
    }
    if let Some(c) = a.children {
        cfg.search.children_per_generation = c;
    }
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    let data = load_data(&mut cfg, &a.data)?;
    let scfg = cfg.search_config();
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let log = out.join(LOG_FILE);

    let state = if a.resume {
        let (saved, state) = load_checkpoint(&ckpt)?;
        let comparable = |c: &flownas_core::search::SearchConfig| flownas_core::search::SearchConfig {
            n_generations: 0,
            ..c.clone()
        };
        if comparable(&saved) != comparable(&scfg) {
            return Err(CliError::Config(format!(
                "{} was written with a different configuration",
                ckpt.display()
            )));
        }
        state
    } else {
        if log.exists() {
            fs::remove_file(&log).map_err(|e| io_err(&log, e))?;
        }
        let initial = match &a.initial {
            Some(p) => read_arch_file(p)?,
            None => scfg.space.initial_architecture(data.input_len, data.n_classes as usize),
        };
        check_dims(&initial, &data)?;
        let adm = flownas_core::arch::check_constraints(&initial, &scfg.thresholds, scfg.bn_accounting);
        if !adm.is_admissible() {
            return Err(CliError::Config(
                "initial architecture violates the hardware constraints".into(),
            ));
        }
        SearchState::new(initial, scfg.seed)
    };
    write_manifest(&cfg, "search")?;

    let (train, val) = data.split(scfg.train.validation_split, cfg.seed);
    let evaluator = TrainerEvaluator {
        train: &train,
        val: &val,
        cfg: scfg.train.clone(),
    };
    let opts = RunOptions {
        checkpoint: Some(ckpt),
        log: Some(log),
        stop_after: a.stop_after,
    };
    let state = run_search(&scfg, &evaluator, state, &opts)?;

    let rows = export_curve(&state);
    write_text(&out.join("curve.csv"), &curve_csv(&rows))?;
    write_text(&out.join("best.arch"), &serialize_arch(state.best_architecture()))?;
    for g in &state.generations {
        println!(
            "generation {:>3}: best {:.4} mean {:.4}{}",
            g.generation,
            g.best_val_accuracy,
            g.mean_val_accuracy(),
            if g.new_global_best { " *" } else { "" }
        );
    }
    if let Some(b) = &state.best {
        println!(
            "best child {} val_acc {:.4} params {} flops {} max_tensor {}",
            b.id, b.val_accuracy, b.cost.params, b.cost.flops, b.cost.max_tensor
        );
    }
    Ok(())
}

fn metrics_csv(m: &Metrics) -> String {
    let mut s = String::from("class,precision,recall,f1,support\n");
    for c in 0..m.f1.len() {
        let support: usize = m.confusion[c].iter().sum();
        s.push_str(&format!(
            "{c},{:.6},{:.6},{:.6},{support}\n",
            m.precision[c], m.recall[c], m.f1[c]
        ));
    }
    s.push_str(&format!(
        "all,,{:.6},{:.6},{}\n",
        m.accuracy,
        m.macro_f1,
        m.confusion.iter().flatten().sum::<usize>()
    ));
    s
}

fn print_metrics(m: &Metrics) {
    println!("accuracy {:.4}", m.accuracy);
    println!("macro_f1 {:.4}", m.macro_f1);
    if !m.absent_classes.is_empty() {
        println!("absent classes (F1 counted as 0): {:?}", m.absent_classes);
    }
    println!("confusion (rows: truth, columns: predicted)");
    for row in &m.confusion {
        println!("{}", row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "));
    }
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&a.run)?;
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(m) = a.multi_start {
        cfg.train.multi_start = m;
    }
    let data = load_data(&mut cfg, &a.data)?;
    let arch = match &a.arch {
        Some(p) => read_arch_file(p)?,
        None => Architecture {
            n_classes: data.n_classes as usize,
            ..Architecture::reference(data.input_len)
        },
    };
    check_dims(&arch, &data)?;
    let tcfg = cfg.train_config();
    let (trainval, test) = data.split(cfg.data.test_split, cfg.seed);
    let (train, val) = trainval.split(tcfg.validation_split, cfg.seed.wrapping_add(1));
    write_manifest(&cfg, "train")?;

    let outcome = multi_start_train(&arch, &train, &val, &tcfg)?;
    let out = &cfg.output_dir;
    let model = out.join("model.wgts");
    let f = File::create(&model).map_err(|e| io_err(&model, e))?;
    write_weights(&outcome.weights, BufWriter::new(f))?;
    write_text(&out.join("model.arch"), &serialize_arch(&arch))?;
    let mut hist = String::from("epoch,train_loss,train_acc,val_loss,val_acc,lr\n");
    for h in &outcome.history {
        hist.push_str(&format!(
            "{},{},{},{},{},{}\n",
            h.epoch, h.train_loss, h.train_accuracy, h.val_loss, h.val_accuracy, h.lr
        ));
    }
    write_text(&out.join("history.csv"), &hist)?;
    println!(
        "best epoch {} val_acc {:.4} val_loss {:.4} ({} epochs run)",
        outcome.best_epoch,
        outcome.val_accuracy,
        outcome.val_loss,
        outcome.history.len()
    );
    if !test.is_empty() {
        let m = evaluate(&arch, &outcome.weights, &test)?;
        write_text(&out.join("test_metrics.csv"), &metrics_csv(&m))?;
        println!("test set ({} samples)", test.len());
        print_metrics(&m);
        let test_path = out.join("test.sess");
        let f = File::create(&test_path).map_err(|e| io_err(&test_path, e))?;
        write_dataset(&test, BufWriter::new(f))?;
    }
    println!("wrote {}", model.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let arch = model_arch(&a.model, a.arch.as_deref())?;
    let data = read_dataset_file(&a.dataset)?;
    check_dims(&arch, &data)?;
    let weights = read_model(&arch, &a.model)?;
    let m = evaluate(&arch, &weights, &data)?;
    print_metrics(&m);
    if let Some(p) = &a.csv {
        write_text(p, &metrics_csv(&m))?;
    }
    Ok(())
}

pub fn quantize(a: QuantizeArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&a.run)?;
    if let Some(b) = a.bits {
        cfg.quant.bits = b;
    }
    if a.per_channel {
        cfg.quant.per_channel = true;
    }
    cfg.validate()?;
    let arch = model_arch(&a.model, a.arch.as_deref())?;
    let calib = read_dataset_file(&a.calib)?;
    check_dims(&arch, &calib)?;
    let data = match &a.data {
        Some(p) => read_dataset_file(p)?,
        None => calib.clone(),
    };
    check_dims(&arch, &data)?;
    let weights = read_model(&arch, &a.model)?;
    let qcfg = QuantConfig {
        bits: cfg.quant.bits,
        per_channel: cfg.quant.per_channel,
    };
    let q = calibrate(&arch, &weights, &calib, qcfg)?;
    let report = compare(&arch, &weights, &q, &data)?;
    let path = a
        .report
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("quant_report.csv"));
    write_text(&path, &report.to_csv())?;
    write_manifest(&cfg, "quantize")?;
    let o = report.overall();
    println!(
        "real {:.4} int{} {:.4} delta {:+.4}",
        o.acc_real, qcfg.bits, o.acc_quant, o.delta
    );
    println!("wrote {}", path.display());
    Ok(())
}
