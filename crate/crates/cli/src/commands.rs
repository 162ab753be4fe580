use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cyten_core::correlation::{correlate_report, curve_csv, SubjectOutcome};
use cyten_core::gradcheck::GradCheckConfig;
use cyten_core::io::{
    load_checkpoint, read_manifest, read_scores, write_scores, CohortManifest, Modality, NetworkKind, ScoreRow,
    MANIFEST_HEADER,
};
use cyten_core::metrics::{counts_at, roc_auc, subject_voting_report, EvalReport, VotingReport};
use cyten_core::models::{
    build_network, check_network_gradients, ensemble_predict, fit_ensemble_weight, warm_start, NetConfig,
};
use cyten_core::phantom::generate_cohort;
use cyten_core::preprocess::preprocess_cohort;
use cyten_core::tensor::Tensor;
use cyten_core::trainer::{load_samples, split_cohort, train, Split, SplitSpec, TrainConfig};
use cyten_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{
    Command, CorrelateArgs, EnsembleArgs, EvalArgs, GradcheckArgs, PhantomArgs, PredictArgs, PreprocessArgs, SplitArgs,
    TrainArgs,
};

/// Largest end-to-end relative error `gradcheck` accepts.
const GRADCHECK_TOL: f64 = 1e-3;

pub(crate) fn run(command: Command, deterministic: bool) -> Result<i32> {
    let done = match command {
        Command::Phantom(a) => phantom(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train_cmd(a, deterministic),
        Command::Predict(a) => predict(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Eval(a) => eval(a),
        Command::Correlate(a) => correlate(a),
        // A failed check is a runtime failure, reported through the exit code.
        Command::Gradcheck(a) => return gradcheck(a).map(|passed| if passed { 0 } else { 2 }),
    };
    done.map(|()| 0)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn modality_of(kind: NetworkKind) -> Modality {
    match kind {
        NetworkKind::Dwinet => Modality::Dwi,
        NetworkKind::Adcnet => Modality::Adc,
    }
}

fn net_config(cfg: &RunConfig, kind: NetworkKind) -> NetConfig {
    match kind {
        NetworkKind::Dwinet => NetConfig::Dwinet(cfg.dwinet.clone()),
        NetworkKind::Adcnet => NetConfig::Adcnet(cfg.adcnet.clone()),
    }
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut params = cfg.phantom;
    if let Some(p) = a.prevalence {
        params.lesion_prevalence = p;
    }
    if let Some(d) = a.dims {
        params.dims = d;
    }
    if let Some(s) = a.spacing {
        params.spacing_mm = s;
    }
    params.validate()?;
    let (_, summary) = generate_cohort(a.n, &params, a.seed, &a.out, a.masks)?;
    println!(
        "{} subjects ({} CE-positive), {} scans written to {}",
        summary.n_subjects,
        summary.n_positive,
        summary.n_scans,
        a.out.display()
    );
    Ok(())
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut pp = cfg.preprocess;
    if let Some(s) = a.spacing {
        pp.target_spacing_mm = s;
    }
    if let Some(d) = a.dims {
        pp.target_dims = d;
    }
    if let Some(m) = a.mask {
        pp.mask_mode = m.into();
    }
    pp.validate()?;
    let manifest = read_manifest(&a.manifest)?;
    let input_dir = if manifest.base_dir.as_os_str().is_empty() { Path::new(".") } else { manifest.base_dir.as_path() };
    if same_dir(input_dir, &a.out) {
        return Err(Error::InvalidArgument("--out must differ from the input directory".into()));
    }
    let prepared = preprocess_cohort(&manifest, &pp, &a.out)?;
    println!("{} volumes written to {}", prepared.records.len(), a.out.display());
    Ok(())
}

/// Contents of a splits file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    /// As given on the command line.
    manifest: String,
    spec: SplitSpec,
    split: Split,
}

fn split(a: SplitArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut spec = cfg.split;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let manifest = read_manifest(&a.manifest)?;
    let split = split_cohort(&manifest, &spec, a.fold)?;
    println!(
        "fold {}: {} train, {} val, {} test subjects",
        split.fold,
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let file = SplitFile { manifest: a.manifest.to_string_lossy().into_owned(), spec, split };
    write_json(&a.out, &file)
}

fn read_split_file(path: &Path) -> Result<(SplitFile, PathBuf)> {
    let file: SplitFile = read_json(path)?;
    file.split.check_disjoint()?;
    let named = PathBuf::from(&file.manifest);
    let manifest = match path.parent() {
        Some(dir) if !named.exists() && named.is_relative() => dir.join(&named),
        _ => named,
    };
    Ok((file, manifest))
}

/// Model description stored in every checkpoint written by `train`.
#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    net: NetConfig,
    dims: [usize; 3],
    train: TrainConfig,
}

#[derive(Debug, Serialize)]
struct TrainReport {
    network: NetworkKind,
    dims: [usize; 3],
    n_train: usize,
    n_val: usize,
    epochs: usize,
    steps: usize,
    final_train_loss: f64,
    final_train_acc: f64,
    best_epoch: usize,
    best_val_acc: Option<f64>,
    warm_start: bool,
    head_only_reset: bool,
}

fn train_cmd(a: TrainArgs, deterministic: bool) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.train.dev |= a.dev;
    cfg.train.deterministic |= deterministic;
    cfg.validate()?;

    let kind = NetworkKind::from(a.net);
    let (file, named_manifest) = read_split_file(&a.splits)?;
    let manifest = read_manifest(a.manifest.as_deref().unwrap_or(&named_manifest))?;
    let modality = modality_of(kind);
    let train_set = load_samples(&manifest, &file.split.train, modality, true)?;
    let val_set = load_samples(&manifest, &file.split.val, modality, true)?;
    let first = train_set
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("no {modality} scans for the training subjects")))?;
    let s = first.input.shape();
    let dims = [s[1], s[2], s[3]];

    let net_cfg = net_config(&cfg, kind);
    let mut net = build_network::<f32>(&net_cfg, dims, cfg.train.seed)?;
    if let Some(w) = &a.warm {
        warm_start(&mut net, &load_checkpoint(w)?, a.head_only_reset)?;
    }
    let meta = ModelMeta { net: net_cfg, dims, train: cfg.train.clone() };
    let outcome = train(&mut net, &train_set, &val_set, &cfg.train, serde_json::to_value(&meta)?, Some(&a.out))?;

    let best_val_acc = outcome.history.records.iter().filter_map(|r| r.val_acc).reduce(f64::max);
    let report = TrainReport {
        network: kind,
        dims,
        n_train: train_set.len(),
        n_val: val_set.len(),
        epochs: cfg.train.epochs,
        steps: outcome.steps,
        final_train_loss: outcome.history.epoch_losses.last().copied().unwrap_or(f64::NAN),
        final_train_acc: outcome.final_train_acc,
        best_epoch: outcome.best_checkpoint.meta.epoch,
        best_val_acc,
        warm_start: a.warm.is_some(),
        head_only_reset: a.head_only_reset,
    };
    println!(
        "{kind}: {} steps, final train accuracy {:.3}, best val accuracy {}",
        report.steps,
        report.final_train_acc,
        best_val_acc.map_or("n/a".into(), |v| format!("{v:.3}"))
    );
    write_json(&a.out.join("train_report.json"), &report)
}

fn predict(a: PredictArgs) -> Result<()> {
    if a.batch_size == 0 {
        return Err(Error::InvalidArgument("--batch-size must be at least 1".into()));
    }
    let ckpt = load_checkpoint(&a.ckpt)?;
    let meta: ModelMeta = serde_json::from_value(ckpt.meta.config.clone())
        .map_err(|e| Error::Checkpoint(format!("metadata does not describe a model: {e}")))?;
    let mut net = build_network::<f32>(&meta.net, meta.dims, meta.train.seed)?;
    ckpt.load_into(ckpt.network_kind, &mut net, |_| false)?;

    let manifest = read_manifest(&a.manifest)?;
    let subjects = match (&a.splits, a.partition.and_then(|p| p.partition())) {
        (Some(path), Some(part)) => read_split_file(path)?.0.split.subjects(part).to_vec(),
        _ => manifest.subjects(),
    };
    let samples = load_samples(&manifest, &subjects, modality_of(net.kind), false)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no scans of the network's modality in the selection".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(a.batch_size) {
        let x = Tensor::stack(&chunk.iter().map(|s| &s.input).collect::<Vec<_>>())?;
        for (s, p) in chunk.iter().zip(net.predict(&x)?) {
            rows.push(ScoreRow {
                subject_id: s.subject_id.clone(),
                session_id: s.session_id.clone(),
                path: s.path.clone(),
                score: f64::from(p),
            });
        }
    }
    write_scores(&rows, &a.out)
}

/// Ground-truth labels per subject, from a manifest (`ce_label`) or a
/// `subject_id,label` CSV.
fn read_labels(path: &Path) -> Result<BTreeMap<String, u8>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = BTreeMap::new();
    let mut put = |subject: &str, label: u8| match labels.insert(subject.to_string(), label) {
        Some(old) if old != label => Err(Error::InvalidArgument(format!("subject {subject} has conflicting labels"))),
        _ => Ok(()),
    };
    if text.lines().next().is_some_and(|h| h.trim_end().split(',').eq(MANIFEST_HEADER)) {
        let m = CohortManifest::parse(&text, "")?;
        for r in &m.records {
            if let Some(l) = r.ce_label {
                put(&r.subject_id, l)?;
            }
        }
    } else {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        if reader.headers()?.iter().ne(["subject_id", "label"]) {
            return Err(Error::InvalidArgument(format!(
                "{}: expected a manifest or a subject_id,label file",
                path.display()
            )));
        }
        for row in reader.records() {
            let row = row?;
            let label = match &row[1] {
                "0" => 0,
                "1" => 1,
                other => return Err(Error::InvalidArgument(format!("label must be 0 or 1, got {other:?}"))),
            };
            put(&row[0], label)?;
        }
    }
    Ok(labels)
}

fn label_of(labels: &BTreeMap<String, u8>, subject: &str) -> Result<u8> {
    labels.get(subject).copied().ok_or_else(|| Error::InvalidArgument(format!("no label for subject {subject}")))
}

/// DWI and ADC scores of the same sessions, in DWI file order.
fn join_scores(dwi: &Path, adc: &Path) -> Result<Vec<(ScoreRow, f64)>> {
    let adc_rows = read_scores(adc)?;
    let mut by_session = BTreeMap::new();
    for r in &adc_rows {
        if by_session.insert((r.subject_id.as_str(), r.session_id.as_str()), r.score).is_some() {
            return Err(Error::InvalidArgument(format!(
                "{}: duplicate session {} {}",
                adc.display(),
                r.subject_id,
                r.session_id
            )));
        }
    }
    let dwi_rows = read_scores(dwi)?;
    if dwi_rows.len() != adc_rows.len() {
        return Err(Error::InvalidArgument(format!("{} DWI scores but {} ADC scores", dwi_rows.len(), adc_rows.len())));
    }
    dwi_rows
        .into_iter()
        .map(|d| {
            let a = by_session
                .get(&(d.subject_id.as_str(), d.session_id.as_str()))
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("no ADC score for {} {}", d.subject_id, d.session_id)))?;
            Ok((d, a))
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct EnsembleReport {
    w: f64,
    fitted: bool,
    n_fit: Option<usize>,
    fit_auc: Option<f64>,
    n_scored: usize,
}

fn ensemble(a: EnsembleArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut ens = cfg.ensemble;
    let (mut n_fit, mut fit_auc) = (None, None);
    if let Some(w) = a.w {
        ens.w = w;
    }
    if let (Some(fd), Some(fa)) = (&a.fit_dwi, &a.fit_adc) {
        let labels = read_labels(a.labels.as_deref().expect("clap requires --labels with --fit-dwi"))?;
        let val = join_scores(fd, fa)?
            .into_iter()
            .map(|(d, p_adc)| Ok((d.score, p_adc, label_of(&labels, &d.subject_id)?)))
            .collect::<Result<Vec<_>>>()?;
        ens.w = fit_ensemble_weight(&val, &ens)?;
        let scores = val.iter().map(|&(d, p, _)| ensemble_predict(d, p, &ens)).collect::<Result<Vec<_>>>()?;
        let y: Vec<u8> = val.iter().map(|v| v.2).collect();
        n_fit = Some(val.len());
        fit_auc = Some(roc_auc(&scores, &y)?.1);
    }
    let rows = join_scores(&a.dwi, &a.adc)?
        .into_iter()
        .map(|(d, p_adc)| Ok(ScoreRow { score: ensemble_predict(d.score, p_adc, &ens)?, ..d }))
        .collect::<Result<Vec<_>>>()?;
    println!("ensemble weight on DWI: {}", ens.w);
    write_scores(&rows, &a.out)?;
    if let Some(path) = &a.report {
        let report = EnsembleReport { w: ens.w, fitted: n_fit.is_some(), n_fit, fit_auc, n_scored: rows.len() };
        write_json(path, &report)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    n_scans: usize,
    n_subjects: usize,
    scan_level: EvalReport,
    voting: Vec<VotingReport>,
}

fn eval(a: EvalArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::InvalidArgument(format!("--threshold must be in [0,1], got {}", a.threshold)));
    }
    let rows = read_scores(&a.scores)?;
    let labels = read_labels(&a.labels)?;
    let y = rows.iter().map(|r| label_of(&labels, &r.subject_id)).collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let (roc, auc) = roc_auc(&scores, &y)?;
    let scan_level = EvalReport::from_counts(counts_at(&scores, &y, a.threshold)?, a.threshold, Some(auc));

    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        groups.entry(r.subject_id.clone()).or_default().push(r.score);
    }
    let voting =
        a.thresholds.iter().map(|&tau| subject_voting_report(&groups, &labels, tau)).collect::<Result<Vec<_>>>()?;
    println!("scan-level AUC {auc:.4}, accuracy {:.4}", scan_level.accuracy);
    for v in &voting {
        println!(
            "subject voting at {:.2}: accuracy {:.4}, F1 {}",
            v.tau,
            v.metrics.accuracy,
            v.metrics.f1.map_or("n/a".into(), |f| format!("{f:.4}"))
        );
    }
    let out = EvalOutput { n_scans: rows.len(), n_subjects: groups.len(), scan_level, voting };
    write_json(&a.out, &out)?;
    write_text(&a.out.with_extension("roc.csv"), &roc.to_csv())
}

fn correlate(a: CorrelateArgs) -> Result<()> {
    let rows = read_scores(&a.predictions)?;
    let manifest = read_manifest(&a.manifest)?;
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in &rows {
        let e = sums.entry(&r.subject_id).or_default();
        e.0 += r.score;
        e.1 += 1;
    }
    let subjects = sums
        .into_iter()
        .map(|(s, (sum, n))| {
            let rec = manifest
                .records
                .iter()
                .find(|r| r.subject_id == s)
                .ok_or_else(|| Error::InvalidArgument(format!("subject {s} is not in the manifest")))?;
            Ok(SubjectOutcome {
                subject_id: s.to_string(),
                probability: sum / n as f64,
                aht_label: rec.aht_label,
                fss_score: rec.fss_score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = correlate_report(&subjects)?;
    println!(
        "McFadden R2: AHT {:.4}, FSS disability {:.4}",
        report.aht.fit.mcfadden_r2, report.outcome.fit.mcfadden_r2
    );
    write_json(&a.out, &report)?;
    write_text(&a.out.with_extension("aht.csv"), &curve_csv(&report.aht.fit, a.curve_points))?;
    write_text(&a.out.with_extension("outcome.csv"), &curve_csv(&report.outcome.fit, a.curve_points))
}

#[derive(Debug, Serialize)]
struct GradcheckOutput {
    network: NetworkKind,
    dims: [usize; 3],
    seed: u64,
    eps: f64,
    batch: usize,
    tolerance: f64,
    passed: bool,
    report: cyten_core::gradcheck::GradCheckReport,
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    if a.batch == 0 || !(a.eps > 0.0) {
        return Err(Error::InvalidArgument("--batch must be positive and --eps positive".into()));
    }
    let cfg = load_config(a.config.as_deref())?;
    let kind = NetworkKind::from(a.net);
    let check = GradCheckConfig { eps: a.eps, min_coords: a.coords, seed: a.seed, ..Default::default() };
    let report = check_network_gradients(&net_config(&cfg, kind), a.dims, a.seed, a.batch, &check)?;
    let passed = report.max_rel_error < GRADCHECK_TOL;
    println!(
        "max relative error {:.3e} over {} coordinates ({} dead excluded): {}",
        report.max_rel_error,
        report.checked,
        report.excluded_dead,
        if passed { "ok" } else { "FAILED" }
    );
    if let Some(out) = &a.out {
        let out_report = GradcheckOutput {
            network: kind,
            dims: a.dims,
            seed: a.seed,
            eps: a.eps,
            batch: a.batch,
            tolerance: GRADCHECK_TOL,
            passed,
            report,
        };
        write_json(out, &out_report)?;
    }
    Ok(passed)
}
