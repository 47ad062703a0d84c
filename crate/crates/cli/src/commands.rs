use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Deserialize;

use tapkit::baselines::{kmeans_parse, tcn_parse, tcn_train, TcnTrainConfig};
use tapkit::data::{
    compute_dataset_stats, generate_synthetic, load_annotations, load_dataset, load_predictions,
    save_dataset, save_predictions, Dataset, Prediction, Split, SynthConfig, ANNOTATIONS_FILE,
};
use tapkit::experiments::{
    default_ablation_grid, run_ablation, sampling_classifier, write_ablation_csv,
    write_accuracy_csv, ProbeConfig, SegmentSource,
};
use tapkit::losses::{train_with, EpochLog, LossConfig};
use tapkit::metrics::{score_at, sweep, Averaging, EvalItem, MatchMode, ThresholdKind};
use tapkit::model::{forward, load_checkpoint, retrieve_top_frames, save_checkpoint, ModelConfig, TransParserModel};
use tapkit::parsing::parse_sequence;
use tapkit::{Error, Result};

use crate::*;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Model and loss settings as read from a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    model: ModelConfig,
    loss: LossConfig,
}

fn selected(ds: &Dataset, split: SplitArg) -> Vec<usize> {
    match split {
        SplitArg::All => (0..ds.records.len()).collect(),
        SplitArg::Train => ds.indices(Split::Train),
        SplitArg::Val => ds.indices(Split::Val),
        SplitArg::Test => ds.indices(Split::Test),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => synth(a, seed),
        Command::Train(a) => train_cmd(a, seed),
        Command::Parse(a) => parse_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Baseline(BaselineCommand::Kmeans(a)) => kmeans_cmd(a, seed),
        Command::Baseline(BaselineCommand::Tcn(a)) => tcn_cmd(a, seed),
        Command::Stats(a) => stats_cmd(a),
        Command::Ablate(a) => ablate_cmd(a, seed),
        Command::CompareSampling(a) => compare_cmd(a, seed),
        Command::Patterns(a) => patterns_cmd(a),
    }
}

fn synth(a: SynthArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let syn = generate_synthetic(&cfg)?;
    let protos = syn.prototypes.clone();
    let n = syn.records.len();
    let ds = Dataset::from(syn);
    save_dataset(&a.out, &ds, Some(&protos))?;
    let cfg_json = serde_json::to_string_pretty(&cfg)?;
    write_bytes(&a.out.join("synth_config.json"), cfg_json.as_bytes())?;
    println!("wrote {n} instances to {}", a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let ds = load_dataset(&a.data.data)?;
    let classes = ds.classes();
    let train_set = ds.train_instances(Split::Train, &classes)?;
    if train_set.is_empty() {
        return Err(Error::Input("dataset has no train split".into()));
    }
    let file: TrainFile = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    let mut mc = file.model;
    mc.feature_dim = ds.feature_dim().unwrap_or(mc.feature_dim);
    mc.num_classes = classes.len();
    macro_rules! set {
        ($target:expr, $flag:expr) => {
            if let Some(v) = $flag {
                $target = v;
            }
        };
    }
    set!(mc.num_units, a.sps_units);
    set!(mc.num_patterns, a.num_patterns);
    set!(mc.pattern_dim, a.pattern_dim);
    set!(mc.attn_dim, a.attn_dim);
    set!(mc.value_dim, a.value_dim);
    set!(mc.hidden_dim, a.hidden_dim);
    mc.layer_norm |= a.layer_norm;
    let mut lc = file.loss;
    set!(lc.lambda, a.lambda);
    set!(lc.epochs, a.epochs);
    set!(lc.learning_rate, a.lr);
    set!(lc.batch_size, a.batch_size);
    set!(lc.seed, seed);
    if a.no_local_loss {
        lc.w_local = 0.0;
    }
    mc.validate()?;

    let model = TransParserModel::new(mc, lc.seed)?;
    let (model, history) = train_with(&train_set, model, &lc, |l: &EpochLog| {
        info!(
            "epoch {}: local {:.6} global {:.6} total {:.6}",
            l.epoch, l.local_loss, l.global_loss, l.total
        );
    })?;
    save_checkpoint(&a.model_out, &model, &classes)?;
    let log_path = a
        .log
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", a.model_out.display())));
    let mut log = String::new();
    for l in &history {
        log.push_str(&serde_json::to_string(l)?);
        log.push('\n');
    }
    write_bytes(&log_path, log.as_bytes())?;
    match history.last() {
        Some(l) => println!(
            "trained {} epochs; final loss {:.6} (local {:.6}, global {:.6})",
            l.epoch, l.total, l.local_loss, l.global_loss
        ),
        None => println!("trained 0 epochs"),
    }
    Ok(())
}

fn load_model_for(ds: &Dataset, path: &Path) -> Result<TransParserModel> {
    let (model, _) = load_checkpoint(path)?;
    if let Some(d) = ds.feature_dim() {
        if d != model.config.feature_dim {
            return Err(Error::Validation(format!(
                "model expects {}-dim features, dataset has {d}",
                model.config.feature_dim
            )));
        }
    }
    Ok(model)
}

fn parse_cmd(a: ParseArgs) -> Result<()> {
    let ds = load_dataset(&a.data.data)?;
    let model = load_model_for(&ds, &a.model)?;
    let preds = selected(&ds, a.split)
        .into_iter()
        .map(|i| {
            let r = &ds.records[i];
            let p = parse_sequence(r.id.clone(), &ds.features[i], &model, a.smooth_window)?;
            Ok(Prediction {
                id: p.id,
                starts: p.starts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    save_predictions(&a.out, &preds)?;
    println!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn eval_items(preds: &[Prediction], gt_dir: &Path) -> Result<Vec<EvalItem>> {
    let records = load_annotations(&gt_dir.join(ANNOTATIONS_FILE))?;
    let by_id: HashMap<&str, _> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    preds
        .iter()
        .map(|p| {
            let r = by_id
                .get(p.id.as_str())
                .ok_or_else(|| Error::Validation(format!("no annotation for prediction {}", p.id)))?;
            if p.starts.last().is_some_and(|&s| s >= r.length) {
                return Err(Error::Validation(format!(
                    "prediction for {} exceeds length {}",
                    p.id, r.length
                )));
            }
            Ok(EvalItem {
                pred: p.starts.clone(),
                gt: r.boundaries.clone(),
                length: r.length,
            })
        })
        .collect()
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let preds = load_predictions(&a.pred)?;
    let items = eval_items(&preds, &a.gt)?;
    let mode = match a.mode {
        ModeArg::OneToOne => MatchMode::OneToOne,
        ModeArg::Independent => MatchMode::Independent,
    };
    let averaging = if a.macro_avg { Averaging::Macro } else { Averaging::Micro };
    let report = sweep(&items, mode, averaging)?;
    if let Some(out) = &a.out {
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        write_bytes(out, &buf)?;
    }
    let avg_name = if a.macro_avg { "macro" } else { "micro" };
    println!("mode: {mode}, {avg_name}-averaged over {} instances", items.len());
    for (name, v) in report.averages() {
        println!("{name}: {v:.4}");
    }
    if let Some(d) = a.at {
        let s = score_at(&items, ThresholdKind::Abs, d, mode, averaging);
        println!("Recall@{d}: {:.4}", s.recall);
        println!("Prec@{d}: {:.4}", s.precision);
        println!("F1@{d}: {:.4}", s.f1);
    }
    Ok(())
}

fn kmeans_cmd(a: KmeansArgs, seed: Option<u64>) -> Result<()> {
    let ds = load_dataset(&a.data.data)?;
    let seed = seed.unwrap_or(0);
    let mut clamped = 0;
    let preds = selected(&ds, a.split)
        .into_iter()
        .map(|i| {
            let r = &ds.records[i];
            let k = if a.k > r.length {
                clamped += 1;
                r.length
            } else {
                a.k
            };
            let p = kmeans_parse(r.id.clone(), &ds.features[i], k, seed)?;
            Ok(Prediction {
                id: p.id,
                starts: p.starts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if clamped > 0 {
        warn!("k = {} exceeds the length of {clamped} instances; clamped to their length", a.k);
    }
    save_predictions(&a.out, &preds)?;
    println!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn tcn_cmd(a: TcnArgs, seed: Option<u64>) -> Result<()> {
    let ds = load_dataset(&a.data.data)?;
    let classes = ds.classes();
    let train_set = ds.train_instances(Split::Train, &classes)?;
    let mut cfg = TcnTrainConfig::default();
    macro_rules! set {
        ($target:expr, $flag:expr) => {
            if let Some(v) = $flag {
                $target = v;
            }
        };
    }
    set!(cfg.epochs, a.epochs);
    set!(cfg.radius, a.radius);
    set!(cfg.threshold, a.threshold);
    set!(cfg.nms_radius, a.nms_radius);
    set!(cfg.hidden, a.hidden);
    set!(cfg.width, a.width);
    set!(cfg.learning_rate, a.lr);
    set!(cfg.seed, seed);
    if a.pos_weight.is_some() {
        cfg.pos_weight = a.pos_weight;
    }
    let (model, history) = tcn_train(&train_set, &cfg)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        info!("tcn loss {first:.6} -> {last:.6}");
    }
    let preds = selected(&ds, a.split)
        .into_iter()
        .map(|i| {
            let r = &ds.records[i];
            let p = tcn_parse(r.id.clone(), &ds.features[i], &model, cfg.threshold, cfg.nms_radius)?;
            Ok(Prediction {
                id: p.id,
                starts: p.starts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    save_predictions(&a.out, &preds)?;
    println!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn stats_cmd(a: StatsArgs) -> Result<()> {
    let records = load_annotations(&a.data.data.join(ANNOTATIONS_FILE))?;
    let stats = compute_dataset_stats(&records)?;
    println!("instances: {}", stats.instances);
    println!("classes: {}", stats.classes.len());
    println!("class,instances,avg_boundaries,train,val,test");
    for (label, c) in &stats.classes {
        let n = |s: Split| c.per_split.get(&s).copied().unwrap_or(0);
        println!(
            "{label},{},{:.4},{},{},{}",
            c.instances,
            c.avg_boundaries,
            n(Split::Train),
            n(Split::Val),
            n(Split::Test)
        );
    }
    let hist: Vec<String> = stats.position_density().iter().map(|v| format!("{v:.4}")).collect();
    println!("boundary position density (20 bins): {}", hist.join(" "));
    if let Some(out) = &a.out {
        write_bytes(out, serde_json::to_string_pretty(&stats)?.as_bytes())?;
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs, seed: Option<u64>) -> Result<()> {
    let ds = load_dataset(&a.data.data)?;
    let file: TrainFile = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    let mut mc = file.model;
    mc.feature_dim = ds.feature_dim().unwrap_or(mc.feature_dim);
    let mut lc = file.loss;
    if let Some(e) = a.epochs {
        lc.epochs = e;
    }
    let seeds = if !a.seeds.is_empty() {
        a.seeds
    } else {
        vec![seed.unwrap_or(lc.seed)]
    };
    let rows = run_ablation(&ds, &default_ablation_grid(), &mc, &lc, &seeds)?;
    let mut buf = Vec::new();
    write_ablation_csv(&mut buf, &rows)?;
    write_bytes(&a.out, &buf)?;
    println!("setting,avg_f1,avg_recall,avg_precision");
    for r in &rows {
        println!("{},{:.4},{:.4},{:.4}", r.setting, r.avg_f1, r.avg_recall, r.avg_precision);
    }
    Ok(())
}

fn compare_cmd(a: CompareArgs, seed: Option<u64>) -> Result<()> {
    let ds = load_dataset(&a.data.data)?;
    let seed = seed.unwrap_or(0);
    let mut probe = ProbeConfig::default();
    if let Some(e) = a.probe_epochs {
        probe.epochs = e;
    }
    let mut sources = vec![SegmentSource::Uniform, SegmentSource::GroundTruth];
    if let Some(p) = &a.pred {
        let map = load_predictions(p)?
            .into_iter()
            .map(|p| (p.id, p.starts))
            .collect();
        sources.push(SegmentSource::Predicted(map));
    }
    let rows = sources
        .iter()
        .map(|s| sampling_classifier(&ds, s, a.segments, &probe, seed))
        .collect::<Result<Vec<_>>>()?;
    println!("scheme,segments,top1,avg_acc");
    for r in &rows {
        println!("{},{},{:.4},{:.4}", r.scheme, r.num_segments, r.top1, r.avg_acc);
    }
    if let Some(out) = &a.out {
        let mut buf = Vec::new();
        write_accuracy_csv(&mut buf, &rows)?;
        write_bytes(out, &buf)?;
    }
    Ok(())
}

fn patterns_cmd(a: PatternArgs) -> Result<()> {
    let ds = load_dataset(&a.data.data)?;
    let model = load_model_for(&ds, &a.model)?;
    let idx = selected(&ds, a.split);
    let traces = idx
        .iter()
        .map(|&i| forward(&ds.features[i], &model))
        .collect::<Result<Vec<_>>>()?;
    let top = retrieve_top_frames(
        idx.iter().zip(&traces).map(|(&i, t)| (ds.records[i].id.as_str(), t)),
        a.pattern,
        a.top,
    )?;
    let mut text = String::from("id,label,frame,score\n");
    let label: HashMap<&str, &str> = ds.records.iter().map(|r| (r.id.as_str(), r.label.as_str())).collect();
    for r in &top {
        text.push_str(&format!("{},{},{},{:.6}\n", r.id, label[r.id.as_str()], r.frame, r.score));
    }
    match &a.out {
        Some(out) => write_bytes(out, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}
