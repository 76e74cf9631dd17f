use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use qseg_core::dataset::synth::generate;
use qseg_core::dataset::{split, SynthSpec, VolumeStore};
use qseg_core::inference::{self, cases_from_store, run_case, score_case, Case, Mode, RunOptions};
use qseg_core::metrics::{CaseMetrics, Report};
use qseg_core::model::{Group, Kernels, Model};
use qseg_core::store::{self, ExportMode};
use qseg_core::training::{self, log_csv, EpochLog, TrainData, LOG_HEADER};
use qseg_core::{Error, Module, Result};

use crate::config::RunConfig;
use crate::Command;

pub fn run(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(cfg, &a.spec, &a.name),
        Command::TrainFloat(a) => train_float(cfg, &a.data),
        Command::Qat(a) => qat(cfg, &a.data, a.float.as_deref(), a.stage, a.from.as_deref()),
        Command::Eval(a) => eval(cfg, a),
        Command::Infer(a) => infer(cfg, a),
        Command::Export(a) => {
            let model = store::import(&a.model)?;
            let mode: ExportMode = a.mode.parse()?;
            let path = cfg.output(&a.name)?;
            store::export(&model, &path, mode)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Inspect(a) => {
            print!("{}", store::inspect(&a.model)?);
            Ok(())
        }
        Command::Bench(a) => bench(cfg, a),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn gen_data(cfg: &RunConfig, spec: &str, name: &str) -> Result<()> {
    let spec = match spec {
        "default" => SynthSpec::default_six(cfg.seed),
        "imbalanced" => SynthSpec::imbalanced(cfg.seed),
        path => {
            let text = fs::read_to_string(path)?;
            let mut s: SynthSpec =
                serde_json::from_str(&text).map_err(|e| Error::config(Module::Dataset, format!("{path}: {e}")))?;
            // the master seed wins over the file's own
            s.seed = cfg.seed;
            s
        }
    };
    let path = cfg.output(name)?;
    VolumeStore::write(&path, &generate(&spec)?)?;
    let store = VolumeStore::open(&path)?;
    let sidecar = store.sidecar();
    write(&cfg.output(&format!("{name}.json"))?, &serde_json::to_string_pretty(&sidecar)?)?;
    println!("{:<12} {:>4} {:>8} {:>8}", "modality", "kind", "volumes", "slices");
    for m in &sidecar.modalities {
        let kind = serde_json::to_value(m.kind)?.as_str().unwrap_or("?").to_string();
        println!("{:<12} {:>4} {:>8} {:>8}", m.name, kind, m.volumes, m.slices);
    }
    println!("wrote {}", path.display());
    Ok(())
}

/// Appends each epoch to a CSV log and writes its checkpoint.
struct EpochSink {
    log: fs::File,
    dir: String,
    cfg: RunConfig,
}

impl EpochSink {
    fn new(cfg: &RunConfig, log_name: &str, dir: &str) -> Result<EpochSink> {
        let mut log = fs::File::create(cfg.output(log_name)?)?;
        writeln!(log, "{LOG_HEADER}")?;
        Ok(EpochSink { log, dir: dir.to_string(), cfg: cfg.clone() })
    }

    fn record(&mut self, l: &EpochLog, m: &Model) -> Result<()> {
        writeln!(self.log, "{}", l.csv_row())?;
        self.log.flush()?;
        let path = self.cfg.output(&format!("{}/epoch_{:02}.qsmf", self.dir, l.epoch))?;
        // Float mode is lossless, so checkpoints resume exactly.
        store::export(m, &path, ExportMode::Float)
    }
}

fn open_data<'a>(store: &'a VolumeStore, cfg: &RunConfig) -> Result<TrainData<'a>> {
    let data = TrainData::new(store, &cfg.train)?;
    log::info!(
        "{} training clips, {} held-out cases",
        data.split.train.total_slices(),
        data.eval_cases.len()
    );
    Ok(data)
}

fn train_float(cfg: &RunConfig, data_path: &Path) -> Result<()> {
    let store = VolumeStore::open(data_path)?;
    let data = open_data(&store, cfg)?;
    let model = Model::new(cfg.model.clone())?;
    let mut sink = EpochSink::new(cfg, "stage0/log.csv", "stage0")?;
    let r = training::train_float(&model, &data, &cfg.train, &mut |l, m| sink.record(l, m))?;
    let out = cfg.output("float.qsmf")?;
    store::export(&r.best, &out, ExportMode::Float)?;
    write(&cfg.output("stage0/report.csv")?, &r.best_report.to_csv())?;
    println!("best epoch {} (eval DSC {:.4})", r.best_epoch, r.best_dsc());
    print!("{}", r.best_report.to_table());
    println!("wrote {}", out.display());
    Ok(())
}

fn qat(cfg: &RunConfig, data_path: &Path, float: Option<&Path>, stage: Option<u8>, from: Option<&Path>) -> Result<()> {
    let float_path = float.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("float.qsmf"));
    if !float_path.exists() {
        return Err(Error::config(
            Module::Training,
            format!("QAT needs a stage-0 float model; `{}` does not exist (run train-float)", float_path.display()),
        ));
    }
    let float_model = store::import(&float_path)?;
    let stages: Vec<u8> = match stage {
        Some(s) => vec![s],
        None => vec![1, 2, 3],
    };
    let start = if stages[0] == 1 {
        float_model.clone()
    } else {
        let prev = stages[0] - 1;
        let p: PathBuf = from.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join(format!("stage{prev}.qsmf")));
        if !p.exists() {
            return Err(Error::config(
                Module::Training,
                format!("stage {} needs the best stage-{prev} checkpoint; `{}` does not exist", stages[0], p.display()),
            ));
        }
        store::import(&p)?
    };
    let store_ = VolumeStore::open(data_path)?;
    let data = open_data(&store_, cfg)?;
    let tag = match stage {
        Some(s) => format!("stage{s}"),
        None => "qat".to_string(),
    };
    let mut sinks = Vec::new();
    for &s in &stages {
        sinks.push(EpochSink::new(cfg, &format!("stage{s}/log.csv"), &format!("stage{s}"))?);
    }
    let first = stages[0];
    let result = training::run_qat(&float_model, &start, &stages, &data, &cfg.train, &mut |l, m| {
        sinks[(l.stage - first) as usize].record(l, m)
    })?;
    for r in &result.stages {
        store::export(&r.best, &cfg.output(&format!("stage{}.qsmf", r.stage))?, ExportMode::Float)?;
    }
    write(&cfg.output(&format!("{tag}_log.csv"))?, &log_csv(&result.logs()))?;
    write(&cfg.output(&format!("{tag}_report.md"))?, &result.report())?;
    write(&cfg.output(&format!("{tag}_final.csv"))?, &result.final_report.to_csv())?;
    if stages.contains(&3) {
        let out = cfg.output("final.qsmf")?;
        store::export(&result.final_model, &out, ExportMode::Quantized)?;
        println!("wrote {}", out.display());
    }
    print!("{}", result.report());
    Ok(())
}

fn kernels_for(model: &Model, flag: Option<&str>) -> Kernels {
    match flag {
        Some("float") => Kernels::Float,
        Some(_) => Kernels::Integer,
        None if model.is_quantized(Group::Encoder) || model.is_quantized(Group::Decoder) => Kernels::Integer,
        None => Kernels::Float,
    }
}

fn eval_cases(store: &VolumeStore, cfg: &RunConfig, all: bool, cap: Option<usize>) -> Result<Vec<Case>> {
    let volumes: Vec<usize> = if all {
        (0..store.len()).collect()
    } else {
        let s = split(store, cfg.train.eval_denominator, cfg.seed)?;
        s.eval.modalities.iter().flat_map(|(_, i)| i.volumes().to_vec()).collect()
    };
    cases_from_store(store, &volumes, cap)
}

fn eval(cfg: &RunConfig, a: &crate::EvalArgs) -> Result<()> {
    let store_ = VolumeStore::open(&a.data)?;
    let cases = eval_cases(&store_, cfg, a.all, a.cap)?;
    let (report, per_case) = if a.oracle {
        let mut all = Vec::new();
        for c in &cases {
            let gt = c.ground_truth.clone().ok_or_else(|| Error::contract(Module::Inference, "case has no ground truth"))?;
            all.extend(score_case(c, &gt, 0.0, &cfg.train.metric)?);
        }
        (Report::from_cases(&all), all)
    } else {
        let path = a.model.as_ref().expect("clap requires --model without --oracle");
        let model = store::import(path)?;
        let opts = RunOptions {
            limits: cfg.limits,
            kernels: kernels_for(&model, a.kernels.as_deref()),
            exec: cfg.train.exec(),
            ..RunOptions::default()
        };
        inference::evaluate(&model, &cases, &opts, &cfg.train.metric)?
    };
    write(&cfg.output("eval.csv")?, &report.to_csv())?;
    write(&cfg.output("eval_cases.csv")?, &cases_csv(&per_case))?;
    print!("{}", report.to_table());
    Ok(())
}

fn cases_csv(rows: &[CaseMetrics]) -> String {
    let mut s = String::from("modality,dsc,nsd,runtime_s\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.modality, r.dsc, r.nsd, r.runtime_s));
    }
    s
}

fn write_png(path: &Path, mask: &[u8], w: usize, h: usize) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::Io(std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(io)?;
    let px: Vec<u8> = mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    writer.write_image_data(&px).map_err(io)?;
    Ok(())
}

fn infer(cfg: &RunConfig, a: &crate::InferArgs) -> Result<()> {
    let store_ = VolumeStore::open(&a.data)?;
    let model = store::import(&a.model)?;
    let case = Case::from_store(&store_, a.volume)?;
    let opts = RunOptions {
        limits: cfg.limits,
        kernels: kernels_for(&model, a.kernels.as_deref()),
        mode: if a.recompute { Mode::Recompute } else { Mode::Cached },
        exec: cfg.train.exec(),
    };
    let out = run_case(&model, &case, &opts)?;
    let (h, w) = case.dims()?;
    let dir = format!("infer/vol{}", a.volume);
    let mut written = 0;
    for (b, per_z) in out.masks.iter().enumerate() {
        let bx = case.boxes[b];
        for (i, m) in per_z.iter().enumerate() {
            write_png(&cfg.output(&format!("{dir}/box{b}_z{:03}.png", bx.z1 + i))?, m, w, h)?;
            written += 1;
        }
    }
    let summary = serde_json::json!({
        "case": case.id,
        "modality": case.modality,
        "boxes": case.boxes.len(),
        "masks": written,
        "encoder_calls": out.encoder_calls,
        "decoder_calls": out.decoder_calls,
        "peak_batch": out.peak_batch,
        "encoder_s": out.encoder_s,
        "decoder_s": out.decoder_s,
        "wall_s": out.wall_s,
    });
    write(&cfg.output(&format!("{dir}/summary.json"))?, &serde_json::to_string_pretty(&summary)?)?;
    if case.ground_truth.is_some() {
        let rows = score_case(&case, &out.masks, out.wall_s, &cfg.train.metric)?;
        for (b, r) in rows.iter().enumerate() {
            println!("box {b}: DSC {:.4} NSD {:.4}", r.dsc, r.nsd);
        }
    }
    println!(
        "{written} masks, {} encoder calls, {} decoder calls, {:.3}s",
        out.encoder_calls, out.decoder_calls, out.wall_s
    );
    Ok(())
}

fn bench(cfg: &RunConfig, a: &crate::BenchArgs) -> Result<()> {
    let store_ = VolumeStore::open(&a.data)?;
    let model = store::import(&a.model)?;
    let cases = eval_cases(&store_, cfg, false, Some(a.cap))?;
    let rows = inference::bench(&model, &cases, a.reps, cfg.limits)?;
    let mut csv = String::from("case,boxes,slices,float_s,integer_s,encoder_s,decoder_s,encoder_calls,recompute_encoder_calls\n");
    println!("{:<24} {:>5} {:>6} {:>9} {:>9} {:>8}", "case", "boxes", "slices", "float s", "int8 s", "enc calls");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.case, r.boxes, r.slices, r.float_s, r.integer_s, r.encoder_s, r.decoder_s, r.encoder_calls, r.recompute_encoder_calls
        ));
        println!(
            "{:<24} {:>5} {:>6} {:>9.4} {:>9.4} {:>8}",
            r.case, r.boxes, r.slices, r.float_s, r.integer_s, r.encoder_calls
        );
    }
    write(&cfg.output("bench.csv")?, &csv)
}
