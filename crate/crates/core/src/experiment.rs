//! End-to-end runs: data preparation, federation, evaluation and run
//! directory artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{qq_diagnostics, QqReport};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{
    apply_label_noise, batch_tensor, generate_synthetic_sites, load_csv, make_binary_task, split, Site, Subject,
    SyntheticShared,
};
use crate::error::{Error, Result};
use crate::eval::importance::{integrated_gradients, occlusion_importance, rank_valid_cells, write_importance_csv, JointEntry};
use crate::eval::{compute_metrics, predict_mc, uncertainty_threshold_report, MetricsReport, Prediction, ThresholdRow};
use crate::federation::{Federation, RoundRecord, SiteData, Trained};
use crate::model::{DirichletAudit, Mode, Network, NetworkParams};
use crate::rng::stream;
use fedda_autograd::Checkpoint;

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const ROUND_LOG: &str = "rounds.jsonl";
pub const ALIGNMENT_CHECKPOINT: &str = "checkpoint_alignment.bin";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.bin";
pub const METRICS: &str = "metrics.json";
pub const PREDICTIONS: &str = "predictions.csv";
pub const THRESHOLDS: &str = "thresholds.csv";
pub const QQ: &str = "qq.csv";
pub const IMPORTANCE: &str = "importance.csv";
/// Present while a run is in progress and left behind when it fails.
pub const PARTIAL_MARKER: &str = "PARTIAL";

pub const TARGET: Site = Site::C;

/// Train/test splits for the three sites plus the planted signal cells of
/// synthetic data.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub sites: Vec<SiteData>,
    pub signal_cells: Vec<(usize, usize)>,
    pub flipped_labels: usize,
}

impl PreparedData {
    pub fn site(&self, site: Site) -> &SiteData {
        &self.sites[site.index()]
    }
}

fn load_subjects(cfg: &ExperimentConfig, seed: u64) -> Result<([Vec<Subject>; 3], Vec<(usize, usize)>)> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let shared = SyntheticShared {
                seed,
                signal_cells: cfg.synthetic.signal_cells,
            };
            let specs = cfg.synthetic.sites().map(|s| s.spec(seed));
            let gen = generate_synthetic_sites(&shared, &specs)?;
            Ok((gen.sites, gen.signal_cells))
        }
        DataSource::Csv => {
            let path = cfg.data.csv.as_ref().ok_or_else(|| Error::Config("data.csv is not set".into()))?;
            let mut sites: [Vec<Subject>; 3] = Default::default();
            for s in load_csv(path)? {
                sites[s.site.index()].push(s);
            }
            if let Some(i) = sites.iter().position(Vec::is_empty) {
                return Err(Error::Data(format!("{} has no subjects for site {}", path.display(), Site::ALL[i])));
            }
            Ok((sites, Vec::new()))
        }
    }
}

/// Loads or generates subjects, builds the binary task, splits each site
/// and applies label noise.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    cfg.validate()?;
    let (subjects, signal_cells) = load_subjects(cfg, seed)?;
    let mut sites = Vec::with_capacity(3);
    let mut flipped_labels = 0;
    for (site, subjects) in Site::ALL.iter().zip(&subjects) {
        let examples = make_binary_task(subjects, cfg.data.task)?;
        let split_seed = stream(seed, &format!("split/{site}")).gen::<u64>();
        let (mut train, test) = split(&examples, cfg.data.train_frac, split_seed)?;
        if *site == cfg.data.noisy_site && cfg.data.label_noise > 0.0 {
            flipped_labels = apply_label_noise(&mut train, cfg.data.label_noise, &mut stream(seed, "label-noise"))?;
        }
        sites.push(SiteData { site: *site, train, test });
    }
    Ok(PreparedData {
        sites,
        signal_cells,
        flipped_labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub target: Site,
    /// Final MC-dropout test metrics per site.
    pub sites: BTreeMap<Site, MetricsReport>,
    /// Target accuracy by uncertainty threshold; absent for softmax heads.
    pub thresholds: Option<Vec<ThresholdRow>>,
    pub dirichlet: DirichletAudit,
    pub flipped_labels: usize,
}

impl RunMetrics {
    pub fn target(&self) -> &MetricsReport {
        &self.sites[&self.target]
    }
}

/// A trained and evaluated run held in memory.
pub struct Outcome {
    pub seed: u64,
    pub net: Network,
    pub data: PreparedData,
    pub alignment_params: NetworkParams,
    pub trained: Trained,
    pub predictions: BTreeMap<Site, Vec<Prediction>>,
    pub metrics: RunMetrics,
}

impl Outcome {
    pub fn feats(&self) -> [&[f64]; 3] {
        let f = &self.trained.feats;
        [&f[0], &f[1], &f[2]]
    }
}

/// Runs both federation stages and evaluates every site's test split.
pub fn train_and_evaluate(cfg: &ExperimentConfig, parallel: bool) -> Result<Outcome> {
    let seed = cfg.run.seed;
    let data = prepare_data(cfg, seed)?;
    let net = Network::new(&cfg.model)?;
    let mut fed = Federation::new(&net, cfg.federation.clone(), data.sites.clone(), seed, parallel)?;
    log::info!("seed {seed}: alignment stage, {} rounds", cfg.federation.alignment_rounds);
    fed.run_alignment()?;
    let alignment_params = fed.global().clone();
    log::info!("seed {seed}: classification stage, {} rounds", cfg.federation.classification_rounds);
    fed.run_classification()?;
    let trained = fed.finish()?;

    let feats = [trained.feats[0].as_slice(), trained.feats[1].as_slice(), trained.feats[2].as_slice()];
    let mut audit = trained.audit;
    let mut predictions = BTreeMap::new();
    let mut sites = BTreeMap::new();
    for s in &data.sites {
        let mut rng = stream(seed, &format!("eval/{}", s.site));
        let preds = predict_mc(
            &net,
            &trained.global,
            &s.test,
            feats,
            cfg.federation.mc_passes,
            cfg.eval.batch_size,
            &mut rng,
            &mut audit,
        )?;
        sites.insert(s.site, compute_metrics(&preds)?);
        predictions.insert(s.site, preds);
    }
    let target_preds = &predictions[&TARGET];
    let thresholds = if target_preds.iter().all(|p| p.uncertainty.is_some()) {
        Some(uncertainty_threshold_report(target_preds, &cfg.eval.thresholds)?)
    } else {
        None
    };
    let metrics = RunMetrics {
        seed,
        target: TARGET,
        sites,
        thresholds,
        dirichlet: audit,
        flipped_labels: data.flipped_labels,
    };
    Ok(Outcome {
        seed,
        net,
        data,
        alignment_params,
        trained,
        predictions,
        metrics,
    })
}

/// Target test samples used for importance, capped and shuffled by seed.
pub fn importance_examples(cfg: &ExperimentConfig, data: &PreparedData) -> Vec<crate::data::Example> {
    let mut examples = data.site(TARGET).test.clone();
    if let Some(n) = cfg.eval.importance_samples.filter(|&n| n < examples.len()) {
        examples.shuffle(&mut stream(cfg.run.seed, "importance/samples"));
        examples.truncate(n);
    }
    examples
}

/// Joint IG/occlusion ranking over the target's valid cells.
pub fn compute_importance(
    cfg: &ExperimentConfig,
    net: &Network,
    params: &NetworkParams,
    feats: [&[f64]; 3],
    data: &PreparedData,
) -> Result<Vec<JointEntry>> {
    let examples = importance_examples(cfg, data);
    let first = examples
        .first()
        .ok_or_else(|| Error::Data("target test split is empty".into()))?;
    let baseline = vec![0.0; crate::data::CELLS];
    let ig = integrated_gradients(net, params, feats, &examples, cfg.eval.ig_steps, &baseline)?;
    let occ = occlusion_importance(net, params, feats, &examples)?;
    rank_valid_cells(&ig, &occ, first.roi.template_lengths())
}

/// Q-Q diagnostics of eval-mode style features on the target's training
/// split.
pub fn compute_qq(cfg: &ExperimentConfig, net: &Network, params: &NetworkParams, data: &PreparedData) -> Result<QqReport> {
    let train = &data.site(TARGET).train;
    let mut rng = stream(cfg.run.seed, "qq");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(train.len());
    for chunk in train.chunks(cfg.eval.batch_size) {
        let f = net.style_features(params, &batch_tensor(chunk), Mode::Eval, &mut rng)?;
        let w = f.shape()[1];
        rows.extend(f.values().chunks(w).map(<[f64]>::to_vec));
    }
    qq_diagnostics(&rows, cfg.eval.qq_components)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictionRow {
    site: Site,
    id: String,
    truth: usize,
    predicted: usize,
    score: f64,
    uncertainty: Option<f64>,
}

fn write_predictions(path: &Path, predictions: &BTreeMap<Site, Vec<Prediction>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (site, preds) in predictions {
        for p in preds {
            w.serialize(PredictionRow {
                site: *site,
                id: p.id.clone(),
                truth: p.truth,
                predicted: p.predicted,
                score: p.score,
                uncertainty: p.uncertainty,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads one site's predictions back from a run directory.
pub fn read_predictions(path: &Path, site: Site) -> Result<Vec<Prediction>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize::<PredictionRow>() {
        let row = row?;
        if row.site == site {
            out.push(Prediction {
                id: row.id,
                truth: row.truth,
                predicted: row.predicted,
                score: row.score,
                uncertainty: row.uncertainty,
            });
        }
    }
    Ok(out)
}

pub fn write_thresholds_csv(path: &Path, rows: &[ThresholdRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "count", "accuracy"])?;
    for r in rows {
        w.write_record([
            r.threshold.to_string(),
            r.count.to_string(),
            r.accuracy.map_or_else(String::new, |a| a.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_checkpoint(path: &Path, params: &NetworkParams, feats: Option<&[Vec<f64>; 3]>) -> Result<()> {
    let mut entries = params.manifest();
    let mut values = params.flatten();
    if let Some(feats) = feats {
        for (site, f) in Site::ALL.iter().zip(feats) {
            entries.push((format!("domain_style.{site}"), vec![f.len()]));
            values.extend_from_slice(f);
        }
    }
    let ck = Checkpoint::new(entries, values)?;
    ck.write_to(BufWriter::new(fs::File::create(path)?))?;
    Ok(())
}

/// Restores final parameters and domain style vectors from a checkpoint.
pub fn read_checkpoint(path: &Path, net: &Network) -> Result<(NetworkParams, [Vec<f64>; 3])> {
    let ck = Checkpoint::read_from(std::io::BufReader::new(fs::File::open(path)?))?;
    let mut params = net.init(&mut stream(0, "restore"));
    let manifest = params.manifest();
    let n_params = params.flatten().len();
    let w = net.config().style_dim();
    let mut expected = manifest;
    for site in Site::ALL {
        expected.push((format!("domain_style.{site}"), vec![w]));
    }
    if ck.entries != expected {
        return Err(Error::Data(format!(
            "{} does not match the configured model",
            path.display()
        )));
    }
    params.assign_flat(&ck.values[..n_params])?;
    let f = &ck.values[n_params..];
    Ok((params, [f[..w].to_vec(), f[w..2 * w].to_vec(), f[2 * w..].to_vec()]))
}

pub fn write_round_log(path: &Path, log: &[RoundRecord]) -> Result<()> {
    let mut text = String::new();
    for r in log {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn metrics_json(metrics: &RunMetrics) -> Result<String> {
    let mut s = serde_json::to_string_pretty(metrics)?;
    s.push('\n');
    Ok(s)
}

fn write_artifacts(cfg: &ExperimentConfig, dir: &Path, parallel: bool) -> Result<RunMetrics> {
    fs::write(dir.join(CONFIG_SNAPSHOT), cfg.to_toml()?)?;
    let out = train_and_evaluate(cfg, parallel)?;
    write_round_log(&dir.join(ROUND_LOG), &out.trained.log)?;
    write_checkpoint(&dir.join(ALIGNMENT_CHECKPOINT), &out.alignment_params, None)?;
    write_checkpoint(&dir.join(FINAL_CHECKPOINT), &out.trained.global, Some(&out.trained.feats))?;
    write_predictions(&dir.join(PREDICTIONS), &out.predictions)?;
    if let Some(rows) = &out.metrics.thresholds {
        write_thresholds_csv(&dir.join(THRESHOLDS), rows)?;
    }
    log::info!("writing diagnostics to {}", dir.display());
    let qq = compute_qq(cfg, &out.net, &out.trained.global, &out.data)?;
    qq.write_csv(fs::File::create(dir.join(QQ))?)?;
    let ranked = compute_importance(cfg, &out.net, &out.trained.global, out.feats(), &out.data)?;
    write_importance_csv(fs::File::create(dir.join(IMPORTANCE))?, &ranked)?;
    fs::write(dir.join(METRICS), metrics_json(&out.metrics)?)?;
    Ok(out.metrics)
}

/// Full run writing every artifact into `dir`. A failure leaves the
/// partial-run marker holding the error.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path, parallel: bool) -> Result<RunMetrics> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let marker = dir.join(PARTIAL_MARKER);
    fs::write(&marker, "run in progress\n")?;
    match write_artifacts(cfg, dir, parallel) {
        Ok(m) => {
            fs::remove_file(&marker)?;
            Ok(m)
        }
        Err(e) => {
            fs::write(&marker, format!("run failed: {e}\n"))?;
            Err(e)
        }
    }
}

/// Path of a required run artifact, or a data error naming it.
pub fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::Data(format!("missing artifact {}", p.display())))
    }
}

/// Configuration, model, final parameters and domain style vectors of a
/// completed run.
pub struct LoadedRun {
    pub config: ExperimentConfig,
    pub net: Network,
    pub params: NetworkParams,
    pub feats: [Vec<f64>; 3],
}

impl LoadedRun {
    pub fn open(dir: &Path) -> Result<Self> {
        let config = ExperimentConfig::load(&require(dir, CONFIG_SNAPSHOT)?)?;
        let net = Network::new(&config.model)?;
        let (params, feats) = read_checkpoint(&require(dir, FINAL_CHECKPOINT)?, &net)?;
        Ok(LoadedRun {
            config,
            net,
            params,
            feats,
        })
    }

    pub fn feats(&self) -> [&[f64]; 3] {
        [&self.feats[0], &self.feats[1], &self.feats[2]]
    }

    pub fn data(&self) -> Result<PreparedData> {
        prepare_data(&self.config, self.config.run.seed)
    }
}

/// Recomputes `qq.csv` from a run directory.
pub fn rerun_qq(dir: &Path) -> Result<QqReport> {
    let run = LoadedRun::open(dir)?;
    let report = compute_qq(&run.config, &run.net, &run.params, &run.data()?)?;
    report.write_csv(fs::File::create(dir.join(QQ))?)?;
    Ok(report)
}

/// Recomputes `importance.csv` from a run directory.
pub fn rerun_importance(dir: &Path) -> Result<Vec<JointEntry>> {
    let run = LoadedRun::open(dir)?;
    let ranked = compute_importance(&run.config, &run.net, &run.params, run.feats(), &run.data()?)?;
    write_importance_csv(fs::File::create(dir.join(IMPORTANCE))?, &ranked)?;
    Ok(ranked)
}

/// Recomputes `thresholds.csv` from the stored target predictions.
pub fn rerun_thresholds(dir: &Path) -> Result<Vec<ThresholdRow>> {
    let config = ExperimentConfig::load(&require(dir, CONFIG_SNAPSHOT)?)?;
    let preds = read_predictions(&require(dir, PREDICTIONS)?, TARGET)?;
    let rows = uncertainty_threshold_report(&preds, &config.eval.thresholds)?;
    write_thresholds_csv(&dir.join(THRESHOLDS), &rows)?;
    Ok(rows)
}
