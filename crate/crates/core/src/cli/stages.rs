use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use super::{Failure, Invocation};
use crate::bagging::{bag_by_strategy, extract_embeddings, BagStrategy, BagTable};
use crate::data::{
    gen_blobs, load_bags, load_checkpoint, load_dataset_dir, load_embeddings, save_bags, save_checkpoint,
    save_dataset_dir, save_embeddings, split_stratified, Checkpoint, Dataset,
};
use crate::error::Error;
use crate::eval::{
    bag_distance, finetune_fraction, intra_class_distance, knn_eval, linear_probe, read_reports, stratified_subset,
    write_reports, EvalReport, FinetuneConfig, ProbeConfig,
};
use crate::train::{distill, fingerprint_kv, parse_feature_source, pretrain_teacher, RelationSource, TrainOutcome};

type StageResult = Result<(), Failure>;

pub(super) fn run(inv: &Invocation) -> StageResult {
    match inv.subcommand {
        "gen-data" => gen_data(inv),
        "pretrain" => pretrain(inv),
        "embed" => embed(inv),
        "bag" => bag(inv),
        "distill" => distill_stage(inv),
        "eval" => eval(inv),
        "sweep" => sweep(inv),
        other => Err(Failure::Usage(format!("unknown subcommand `{other}`"))),
    }
}

fn usage(e: Error) -> Failure {
    match e {
        Error::Config(m) => Failure::Usage(m),
        other => Failure::Run(other),
    }
}

fn feature_source(inv: &Invocation) -> Result<crate::nets::FeatureSource, Failure> {
    let v = inv.settings.get("feature_source");
    parse_feature_source(v)
        .ok_or_else(|| Failure::Usage(format!("feature_source: `{v}` is not projection or backbone")))
}

fn gen_data(inv: &Invocation) -> StageResult {
    let s = &inv.settings;
    let seed = s.parse("seed").map_err(usage)?;
    let data = gen_blobs(
        s.parse("n").map_err(usage)?,
        s.parse("dim").map_err(usage)?,
        s.parse("classes").map_err(usage)?,
        s.parse("class_sep").map_err(usage)?,
        s.parse("noise").map_err(usage)?,
        seed,
    )?;
    let (train, val) = split_stratified(&data, s.parse("val_fraction").map_err(usage)?, seed)?;
    save_dataset_dir(inv.required("out")?, &train, &val)?;
    println!("train={} val={}", train.len(), val.len());
    Ok(())
}

fn write_metrics(inv: &Invocation, outcome: &TrainOutcome, every: usize) -> StageResult {
    outcome.write_metrics(&inv.run_dir.join("metrics.txt"), every)?;
    if let Some(p) = inv.path("metrics") {
        outcome.write_metrics(p, every)?;
    }
    if let Some(last) = outcome.metrics.last() {
        println!("{last}");
    }
    Ok(())
}

fn pretrain(inv: &Invocation) -> StageResult {
    let config = inv.settings.train_config().map_err(usage)?;
    let (train, _) = load_dataset_dir(inv.required("data")?)?;
    let outcome = pretrain_teacher(&config, &train)?;
    save_checkpoint(&outcome.checkpoint, inv.required("out")?)?;
    write_metrics(inv, &outcome, config.log_every)
}

fn embed(inv: &Invocation) -> StageResult {
    let ckpt = load_checkpoint(inv.required("ckpt")?)?;
    let (train, val) = load_dataset_dir(inv.required("data")?)?;
    let data = match inv.settings.get("split") {
        "train" => train,
        "val" => val,
        other => return Err(Failure::Usage(format!("split: `{other}` is not train or val"))),
    };
    let e = extract_embeddings(&ckpt.params, &data, feature_source(inv)?, 256)?;
    save_embeddings(&e, inv.required("out")?)?;
    println!("rows={} dim={}", e.len(), e.dim());
    Ok(())
}

fn bag(inv: &Invocation) -> StageResult {
    let s = &inv.settings;
    let e = load_embeddings(inv.required("emb")?)?.matrix;
    let labels = match inv.path("data") {
        Some(dir) => load_dataset_dir(dir)?.0.labels().map(<[u32]>::to_vec),
        None => None,
    };
    let strategy = match s.get("strategy") {
        "knn" => BagStrategy::Knn {
            k: s.parse("k").map_err(usage)?,
        },
        "kmeans" => BagStrategy::KMeans {
            clusters: s.parse("c").map_err(usage)?,
        },
        "labels" => BagStrategy::Labels { classes: 0 },
        other => {
            return Err(Failure::Usage(format!(
                "strategy: `{other}` is not knn, kmeans or labels"
            )))
        }
    };
    let bags = bag_by_strategy(
        strategy,
        &e,
        labels.as_deref(),
        s.parse("kmeans_max_iters").map_err(usage)?,
        s.parse("seed").map_err(usage)?,
    )?;
    save_bags(&bags, inv.required("out")?)?;
    println!(
        "bags={} strategy={} param={}",
        bags.len(),
        bags.strategy().name(),
        bags.strategy().param()
    );
    Ok(())
}

fn distill_stage(inv: &Invocation) -> StageResult {
    let config = inv.settings.train_config().map_err(usage)?;
    let (train, _) = load_dataset_dir(inv.required("data")?)?;
    let teacher = load_checkpoint(inv.required("teacher")?)?;
    let bags = match inv.path("bags") {
        Some(p) => load_bags(p)?,
        None if config.relation_source == RelationSource::Teacher => {
            return Err(Failure::Usage("relation_source=teacher needs --bags".into()))
        }
        None => BagTable::new(config.bag_strategy, Vec::new())?,
    };
    let outcome = distill(&config, &teacher, &bags, &train)?;
    save_checkpoint(&outcome.checkpoint, inv.required("out")?)?;
    write_metrics(inv, &outcome, config.log_every)
}

fn report(inv: &Invocation, ckpt: &Checkpoint, metric: String, value: f64, sizes: (usize, usize)) -> StageResult {
    let fp = format!("{:016x}", ckpt.fingerprint);
    let pairs = inv.settings.pairs().iter().map(|(k, v)| (*k, v.as_str()));
    let config = fingerprint_kv(pairs.chain([("checkpoint", fp.as_str())]));
    let seed = inv.settings.parse("seed").map_err(usage)?;
    let r = EvalReport::new(metric, value, seed, config, sizes.0, sizes.1)?;
    write_reports(&inv.run_dir.join("report.txt"), std::slice::from_ref(&r))?;
    if let Some(p) = inv.path("out") {
        write_reports(p, std::slice::from_ref(&r))?;
    }
    println!("{r}");
    Ok(())
}

fn embedded(ckpt: &Checkpoint, data: &Dataset, inv: &Invocation) -> Result<crate::tensor::Tensor, Failure> {
    Ok(extract_embeddings(&ckpt.params, data, feature_source(inv)?, 256)?.to_tensor())
}

fn eval(inv: &Invocation) -> StageResult {
    let s = &inv.settings;
    let ckpt = load_checkpoint(inv.required("ckpt")?)?;
    let (train, val) = load_dataset_dir(inv.required("data")?)?;
    let seed = s.parse("seed").map_err(usage)?;
    match s.get("mode") {
        "knn" => {
            let k: usize = s.parse("k").map_err(usage)?;
            let acc = knn_eval(
                &embedded(&ckpt, &train, inv)?,
                train.require_labels()?,
                &embedded(&ckpt, &val, inv)?,
                val.require_labels()?,
                k,
            )?;
            report(inv, &ckpt, format!("knn{k}"), acc, (train.len(), val.len()))
        }
        "linear" => {
            let config = ProbeConfig {
                epochs: s.parse("probe_epochs").map_err(usage)?,
                lr: s.parse("probe_lr").map_err(usage)?,
                seed,
                ..ProbeConfig::default()
            };
            let acc = linear_probe(
                &embedded(&ckpt, &train, inv)?,
                train.require_labels()?,
                &embedded(&ckpt, &val, inv)?,
                val.require_labels()?,
                &config,
            )?;
            report(inv, &ckpt, "linear".into(), acc, (train.len(), val.len()))
        }
        "finetune" => {
            let fraction: f64 = s.parse("fraction").map_err(usage)?;
            let config = FinetuneConfig {
                epochs: s.parse("finetune_epochs").map_err(usage)?,
                lr: s.parse("finetune_lr").map_err(usage)?,
                seed,
                ..FinetuneConfig::default()
            };
            let labeled = stratified_subset(train.require_labels()?, fraction, seed)?.len();
            let acc = finetune_fraction(&ckpt.params, &train, &val, fraction, &config)?;
            report(inv, &ckpt, format!("finetune{fraction}"), acc, (labeled, val.len()))
        }
        "bagdis" => {
            let bags = load_bags(
                inv.path("bags")
                    .ok_or_else(|| Failure::Usage("mode bagdis needs --bags".into()))?,
            )?;
            let d = bag_distance(&ckpt.params, &bags, &train)?;
            report(inv, &ckpt, "bagdis".into(), d.value, (train.len(), 0))
        }
        "intra-class" => {
            let e = extract_embeddings(&ckpt.params, &val, crate::nets::FeatureSource::Projection, 256)?;
            let d = intra_class_distance(&e.to_tensor(), val.require_labels()?)?;
            report(inv, &ckpt, "intra-class".into(), d, (0, val.len()))
        }
        other => Err(Failure::Usage(format!(
            "mode: `{other}` is not knn, linear, finetune, bagdis or intra-class"
        ))),
    }
}

fn sweep_values(inv: &Invocation) -> Result<Vec<usize>, Failure> {
    let raw = inv.settings.get("values");
    let values: Vec<usize> = raw
        .split(',')
        .map(|t| t.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Usage(format!("values: cannot parse `{raw}`")))?;
    if values.is_empty() || values.contains(&0) {
        return Err(Failure::Usage("values must be positive integers".into()));
    }
    Ok(values)
}

fn sweep_dir(out: &Path, param: &str, v: usize) -> PathBuf {
    out.join(format!("{param}-{v}"))
}

/// One rebag → distill → knn report cycle.
fn sweep_one(inv: &Invocation, param: &str, v: usize) -> StageResult {
    let s = &inv.settings;
    let mut config = s.train_config().map_err(usage)?;
    config.bag_strategy = match param {
        "k" => BagStrategy::Knn { k: v },
        _ => BagStrategy::KMeans { clusters: v },
    };
    let eval_k: usize = s.parse("eval_k").map_err(usage)?;
    let dir = sweep_dir(inv.required("out")?, param, v);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (train, val) = load_dataset_dir(inv.required("data")?)?;
    let teacher = load_checkpoint(inv.required("teacher")?)?;

    let te = extract_embeddings(&teacher.params, &train, config.feature_source, 256)?;
    let bags = bag_by_strategy(
        config.bag_strategy,
        &te,
        train.labels(),
        config.kmeans_max_iters,
        config.seed,
    )?;
    save_bags(&bags, &dir.join("bags.tsv"))?;
    let outcome = distill(&config, &teacher, &bags, &train)?;
    save_checkpoint(&outcome.checkpoint, &dir.join("student.ckpt"))?;
    outcome.write_metrics(&dir.join("metrics.txt"), config.log_every)?;

    let params = &outcome.checkpoint.params;
    let source = crate::nets::FeatureSource::Projection;
    let acc = knn_eval(
        &extract_embeddings(params, &train, source, 256)?.to_tensor(),
        train.require_labels()?,
        &extract_embeddings(params, &val, source, 256)?.to_tensor(),
        val.require_labels()?,
        eval_k,
    )?;
    let r = EvalReport::new(
        format!("knn{eval_k}@{param}{v}"),
        acc,
        config.seed,
        outcome.checkpoint.fingerprint,
        train.len(),
        val.len(),
    )?;
    write_reports(&dir.join("report.txt"), &[r])?;
    Ok(())
}

/// Re-invokes this executable for a single value, forwarding every setting.
fn spawn_child(inv: &Invocation, v: usize) -> Result<Child, Failure> {
    let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
    let mut cmd = Command::new(exe);
    cmd.arg("sweep").arg("--single");
    for (name, p) in inv.inputs.iter().chain(&inv.outputs) {
        cmd.arg(format!("--{name}")).arg(p);
    }
    for (k, val) in inv.settings.pairs() {
        let val = match *k {
            "values" => v.to_string(),
            "jobs" => "1".into(),
            _ => val.clone(),
        };
        cmd.arg(format!("--{}", k.replace('_', "-"))).arg(val);
    }
    cmd.spawn().map_err(|e| Failure::Run(Error::io("sweep child", e)))
}

fn wait_child(mut child: Child, v: usize) -> StageResult {
    let status = child.wait().map_err(|e| Error::io("sweep child", e))?;
    match status.code() {
        Some(0) => Ok(()),
        code => Err(Failure::Child {
            code: code.unwrap_or(super::EXIT_IO),
            what: format!("sweep run for value {v}"),
        }),
    }
}

fn sweep(inv: &Invocation) -> StageResult {
    let s = &inv.settings;
    let param = s.get("param");
    if !matches!(param, "k" | "c") {
        return Err(Failure::Usage(format!("param: `{param}` is not k or c")));
    }
    let values = sweep_values(inv)?;
    let jobs: usize = s.parse("jobs").map_err(usage)?;
    if jobs == 0 {
        return Err(Failure::Usage("jobs must be positive".into()));
    }
    s.train_config().map_err(usage)?.validate()?;
    if jobs == 1 || values.len() == 1 {
        for &v in &values {
            sweep_one(inv, param, v)?;
        }
    } else {
        let mut running: Vec<(Child, usize)> = Vec::new();
        let mut first_err = None;
        for &v in &values {
            if running.len() == jobs {
                let (c, w) = running.remove(0);
                if let Err(e) = wait_child(c, w) {
                    first_err.get_or_insert(e);
                }
            }
            running.push((spawn_child(inv, v)?, v));
        }
        for (c, w) in running {
            if let Err(e) = wait_child(c, w) {
                first_err.get_or_insert(e);
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
    }
    if inv.flag("single") {
        return Ok(());
    }
    let out = inv.required("out")?;
    let mut reports = Vec::new();
    for &v in &values {
        reports.extend(read_reports(&sweep_dir(out, param, v).join("report.txt"))?);
    }
    write_reports(&out.join("reports.txt"), &reports)?;
    write_reports(&inv.run_dir.join("report.txt"), &reports)?;
    for r in &reports {
        println!("{r}");
    }
    Ok(())
}
