//! AUC computation, checkpoint evaluation, and the ablation harness.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{GridSpec, RunConfig};
use crate::model::{AudioCache, ForwardCtx, ModelError, ModelParams, RecSample, Variant};
use crate::report::{csv_table, fingerprint_of, markdown_table, svg_line_chart};
use crate::synth::{
    assemble_samples, kshot_sample, split_interactions, Dataset, FeatureStore, SynthError,
};
use crate::tensor::PoolMethod;
use crate::text::{build_vocab, RenderStats, Vocabulary};
use crate::train::{train, TrainError};

#[derive(Debug)]
pub enum EvalError {
    /// AUC is undefined when only one class is present.
    SingleClass { n_pos: usize, n_neg: usize },
    /// Mismatched or empty score/label vectors, or non-finite scores.
    BadInput(String),
    Model(ModelError),
    Synth(SynthError),
    Train(Box<TrainError>),
    Io(std::io::Error),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SingleClass { n_pos, n_neg } => {
                write!(f, "auc undefined: {n_pos} positives, {n_neg} negatives")
            }
            Self::BadInput(msg) => write!(f, "bad auc input: {msg}"),
            Self::Model(e) => write!(f, "model error: {e}"),
            Self::Synth(e) => write!(f, "dataset error: {e}"),
            Self::Train(e) => write!(f, "training error: {e}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

impl From<SynthError> for EvalError {
    fn from(e: SynthError) -> Self {
        Self::Synth(e)
    }
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        Self::Train(Box::new(e))
    }
}

impl From<std::io::Error> for EvalError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Rank-based (Mann-Whitney) AUC with average ranks for ties: the fraction
/// of correctly ordered positive/negative pairs, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(EvalError::BadInput(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::BadInput("non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass { n_pos, n_neg });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = n_pos as f64;
    let n = n_neg as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Deterministic eval-mode scores: sigmoid of the logit per sample.
pub fn score_samples(model: &ModelParams, samples: &[RecSample]) -> Result<Vec<(f64, u8)>> {
    let refs: Vec<&RecSample> = samples.iter().collect();
    score_sample_refs(model, &refs)
}

pub(crate) fn score_sample_refs(
    model: &ModelParams,
    samples: &[&RecSample],
) -> Result<Vec<(f64, u8)>> {
    let mut cache = AudioCache::new();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let mut ctx = ForwardCtx::eval();
        let logit = model.forward_variant(s, &mut ctx, Some(&mut cache))?;
        out.push((sigmoid(logit.scalar_value()), s.label));
    }
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One run's result: the unit of ablation tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub variant: Variant,
    pub intra_audio_pool: PoolMethod,
    pub cross_modal_pool: PoolMethod,
    pub n_mels: usize,
    pub k_shot: usize,
    pub seed: u64,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub wall_secs: f64,
}

/// AUC of a model over a sample split, wrapped in a report.
pub fn evaluate(
    model: &ModelParams,
    samples: &[RecSample],
    run_id: &str,
    k_shot: usize,
    seed: u64,
) -> Result<EvalReport> {
    let start = Instant::now();
    let pairs = score_samples(model, samples)?;
    let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
    let value = auc(&scores, &labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    Ok(EvalReport {
        run_id: run_id.to_string(),
        variant: model.variant(),
        intra_audio_pool: model.variant_cfg.intra_audio_pool,
        cross_modal_pool: model.variant_cfg.cross_modal_pool,
        n_mels: model.n_mels,
        k_shot,
        seed,
        auc: value,
        n_pos,
        n_neg: labels.len() - n_pos,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// Everything one grid cell needs, resolved from the base config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CellConfig {
    pub config: RunConfig,
}

/// Train and evaluate a single fully-specified configuration on a prepared
/// dataset. `run_id` keys the result; the test split provides the AUC.
pub fn run_cell(
    config: &RunConfig,
    dataset: &Dataset,
    vocab: &Vocabulary,
    run_id: &str,
) -> Result<(EvalReport, ModelParams, crate::train::TrainHistory)> {
    let start = Instant::now();
    let (train_split, val_split, test_split) = split_interactions(&dataset.interactions);
    let features = if config.variant.variant.uses_audio() {
        let mut fb = config.fbank.clone();
        fb.n_mels = config.fbank.n_mels;
        Some(FeatureStore::load_or_extract(dataset, &fb)?)
    } else {
        None
    };
    let shots = kshot_sample(&train_split, config.train.k_shot, config.train.seed)?;
    let mut stats = RenderStats::default();
    let train_samples = assemble_samples(&shots, dataset, vocab, features.as_ref(), &mut stats);
    let val_samples = assemble_samples(&val_split, dataset, vocab, features.as_ref(), &mut stats);
    let test_samples = assemble_samples(&test_split, dataset, vocab, features.as_ref(), &mut stats);

    let mut encoder_cfg = config.encoder.clone();
    encoder_cfg.vocab_size = vocab.len();
    let model = ModelParams::init(
        encoder_cfg,
        config.variant.clone(),
        config.fbank.n_mels,
        config.train.seed,
    )?;
    let outcome = train(&model, &train_samples, Some(&val_samples), &config.train)?;
    let mut report = evaluate(&model, &test_samples, run_id, config.train.k_shot, config.train.seed)?;
    report.wall_secs = start.elapsed().as_secs_f64();
    Ok((report, model, outcome.history))
}

/// Rendered ablation output.
pub struct AblationOutcome {
    pub reports: Vec<EvalReport>,
    pub tables: BTreeMap<String, String>,
}

/// Sweep the grid, training each cell unless its fingerprint is already
/// cached under `results_root/cells/<fingerprint>/report.json`. Cells run
/// on up to `jobs` worker threads.
pub fn run_ablation(
    base: &RunConfig,
    dataset_dir: &Path,
    results_root: &Path,
    jobs: usize,
) -> Result<AblationOutcome> {
    let dataset = crate::synth::load_interactions(dataset_dir)?;
    let (train_split, _, _) = split_interactions(&dataset.interactions);
    let corpus = crate::synth::corpus_for_vocab(&train_split, &dataset);
    let vocab = build_vocab(&corpus, base.max_vocab).map_err(|e| {
        EvalError::BadInput(format!("vocabulary: {e}"))
    })?;

    let grid = &base.grid;
    let cells = expand_grid(base, grid);

    // Pre-extract features for every mel count so parallel cells only read.
    for &mels in &grid_mels(base) {
        let mut fb = base.fbank.clone();
        fb.n_mels = mels;
        FeatureStore::load_or_extract(&dataset, &fb)?;
    }

    std::fs::create_dir_all(results_root.join("cells"))?;
    let reports = run_cells_parallel(&cells, &dataset, &vocab, results_root, jobs)?;

    let tables = render_tables(&reports);
    for (name, content) in &tables {
        std::fs::write(results_root.join(name), content)?;
    }
    let ks: Vec<usize> = dedup(reports.iter().map(|r| r.k_shot).collect());
    if ks.len() > 1 {
        let mut series = Vec::new();
        for variant in dedup(reports.iter().map(|r| r.variant.to_string()).collect()) {
            let pts: Vec<(f64, f64)> = ks
                .iter()
                .map(|&k| {
                    let vals: Vec<f64> = reports
                        .iter()
                        .filter(|r| r.variant.to_string() == variant && r.k_shot == k)
                        .map(|r| r.auc)
                        .collect();
                    (k as f64, mean(&vals))
                })
                .collect();
            series.push((variant, pts));
        }
        std::fs::write(
            results_root.join("auc_vs_k.svg"),
            svg_line_chart("AUC by shot count", &series, "K", "AUC"),
        )?;
    }
    Ok(AblationOutcome { reports, tables })
}

fn grid_mels(base: &RunConfig) -> Vec<usize> {
    if base.grid.n_mels.is_empty() {
        vec![base.fbank.n_mels]
    } else {
        base.grid.n_mels.clone()
    }
}

/// Full cross product of the grid axes over the base config.
pub fn expand_grid(base: &RunConfig, grid: &GridSpec) -> Vec<RunConfig> {
    let variants = if grid.variants.is_empty() {
        vec![base.variant.variant]
    } else {
        grid.variants.clone()
    };
    let intras = if grid.intra_audio_pools.is_empty() {
        vec![base.variant.intra_audio_pool]
    } else {
        grid.intra_audio_pools.clone()
    };
    let crosses = if grid.cross_modal_pools.is_empty() {
        vec![base.variant.cross_modal_pool]
    } else {
        grid.cross_modal_pools.clone()
    };
    let mels = grid_mels(base);
    let ks = if grid.ks.is_empty() {
        vec![base.train.k_shot]
    } else {
        grid.ks.clone()
    };
    let seeds = if grid.seeds.is_empty() {
        vec![base.train.seed]
    } else {
        grid.seeds.clone()
    };
    let mut cells = Vec::new();
    for &variant in &variants {
        for &intra in &intras {
            for &cross in &crosses {
                for &m in &mels {
                    for &k in &ks {
                        for &seed in &seeds {
                            let mut c = base.clone();
                            c.grid = GridSpec::default();
                            c.variant.variant = variant;
                            c.variant.intra_audio_pool = intra;
                            c.variant.cross_modal_pool = cross;
                            c.fbank.n_mels = m;
                            c.train.k_shot = k;
                            c.train.seed = seed;
                            cells.push(c);
                        }
                    }
                }
            }
        }
    }
    cells
}

fn run_cells_parallel(
    cells: &[RunConfig],
    dataset: &Dataset,
    vocab: &Vocabulary,
    results_root: &Path,
    jobs: usize,
) -> Result<Vec<EvalReport>> {
    let jobs = jobs.max(1).min(cells.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<EvalReport>>>> =
        (0..cells.len()).map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let outcome = run_or_load_cell(&cells[i], dataset, vocab, results_root);
                *results[i].lock().unwrap() = Some(outcome);
            });
        }
    });
    let mut reports = Vec::with_capacity(cells.len());
    for slot in results {
        reports.push(slot.into_inner().unwrap().expect("cell ran")?);
    }
    Ok(reports)
}

fn run_or_load_cell(
    cell: &RunConfig,
    dataset: &Dataset,
    vocab: &Vocabulary,
    results_root: &Path,
) -> Result<EvalReport> {
    let fp = fingerprint_of(cell);
    let dir = results_root.join("cells").join(&fp);
    let report_path = dir.join("report.json");
    if report_path.exists() {
        let text = std::fs::read_to_string(&report_path)?;
        if let Ok(report) = serde_json::from_str::<EvalReport>(&text) {
            return Ok(report);
        }
    }
    let (report, model, history) = run_cell(cell, dataset, vocab, &fp)?;
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cell).unwrap())?;
    crate::model::checkpoint::save(&model, dir.join("checkpoint.atfl"))?;
    std::fs::write(dir.join("history.csv"), history.steps_csv())?;
    std::fs::write(dir.join("epochs.csv"), history.epochs_csv())?;
    std::fs::write(&report_path, serde_json::to_string_pretty(&report).unwrap())?;
    Ok(report)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

fn dedup<T: Clone + PartialEq>(mut v: Vec<T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for x in v.drain(..) {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

/// Mean +/- std tables over seeds: fine-tuning variants, pooling pairs,
/// and mel counts.
pub fn render_tables(reports: &[EvalReport]) -> BTreeMap<String, String> {
    let mut tables = BTreeMap::new();
    let aggregate = |keys: Vec<(String, Vec<f64>)>| -> Vec<Vec<String>> {
        keys.into_iter()
            .map(|(k, aucs)| {
                vec![
                    k,
                    format!("{:.4}", mean(&aucs)),
                    format!("{:.4}", std_dev(&aucs)),
                    aucs.len().to_string(),
                ]
            })
            .collect()
    };
    let group = |key: &dyn Fn(&EvalReport) -> String| -> Vec<(String, Vec<f64>)> {
        let mut keys: Vec<String> = Vec::new();
        let mut values: Vec<Vec<f64>> = Vec::new();
        for r in reports {
            let k = key(r);
            match keys.iter().position(|x| *x == k) {
                Some(i) => values[i].push(r.auc),
                None => {
                    keys.push(k);
                    values.push(vec![r.auc]);
                }
            }
        }
        keys.into_iter().zip(values).collect()
    };

    let variant_rows = aggregate(group(&|r: &EvalReport| r.variant.to_string()));
    tables.insert(
        "table_variants.md".to_string(),
        markdown_table(&["variant", "mean_auc", "std_auc", "runs"], &variant_rows),
    );
    tables.insert(
        "table_variants.csv".to_string(),
        csv_table(&["variant", "mean_auc", "std_auc", "runs"], &variant_rows),
    );

    let pool_rows = aggregate(group(&|r: &EvalReport| {
        format!("{}/{}", r.intra_audio_pool, r.cross_modal_pool)
    }));
    tables.insert(
        "table_pooling.md".to_string(),
        markdown_table(
            &["intra_audio/cross_modal", "mean_auc", "std_auc", "runs"],
            &pool_rows,
        ),
    );
    tables.insert(
        "table_pooling.csv".to_string(),
        csv_table(
            &["intra_audio/cross_modal", "mean_auc", "std_auc", "runs"],
            &pool_rows,
        ),
    );

    let mel_rows = aggregate(group(&|r: &EvalReport| r.n_mels.to_string()));
    tables.insert(
        "table_mels.md".to_string(),
        markdown_table(&["n_mels", "mean_auc", "std_auc", "runs"], &mel_rows),
    );
    tables.insert(
        "table_mels.csv".to_string(),
        csv_table(&["n_mels", "mean_auc", "std_auc", "runs"], &mel_rows),
    );

    let k_rows = aggregate(group(&|r: &EvalReport| r.k_shot.to_string()));
    tables.insert(
        "table_k.md".to_string(),
        markdown_table(&["k_shot", "mean_auc", "std_auc", "runs"], &k_rows),
    );
    tables.insert(
        "table_k.csv".to_string(),
        csv_table(&["k_shot", "mean_auc", "std_auc", "runs"], &k_rows),
    );
    tables
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// O(P*N) pair-counting oracle, ties worth one half.
    fn auc_bruteforce(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_hand_cases() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4, 0.4, 0.4, 0.4], &[1, 0, 1, 0]).unwrap(), 0.5);
        // brute force over 4 pos-neg pairs: (1 + 0.5 + 1 + 1)/4
        assert_eq!(auc(&[0.8, 0.6, 0.6, 0.2], &[1, 0, 1, 0]).unwrap(), 0.875);
    }

    #[test]
    fn auc_matches_bruteforce_exactly_on_200_random_instances() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for case in 0..200 {
            let n = rng.gen_range(2..=50);
            // quantized scores force plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            if labels.iter().all(|&l| l == 1) {
                labels[0] = 0;
            }
            if labels.iter().all(|&l| l == 0) {
                labels[0] = 1;
            }
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_bruteforce(&scores, &labels);
            assert_eq!(fast.to_bits(), slow.to_bits(), "case {case}: {fast} vs {slow}");
        }
    }

    #[test]
    fn auc_invariant_under_increasing_transforms() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let scores: Vec<f64> = (0..60).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels: Vec<u8> = (0..60).map(|_| rng.gen_range(0..2) as u8).collect();
        let base = auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
        let shifted: Vec<f64> = scores.iter().map(|&s| 3.0 * s + 11.0).collect();
        assert_eq!(base, auc(&squashed, &labels).unwrap());
        assert_eq!(base, auc(&shifted, &labels).unwrap());
    }

    #[test]
    fn auc_rejects_single_class() {
        assert!(matches!(
            auc(&[0.1, 0.2], &[1, 1]),
            Err(EvalError::SingleClass { n_pos: 2, n_neg: 0 })
        ));
    }

    #[test]
    fn shuffled_labels_give_chance_auc() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let scores: Vec<f64> = (0..2000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..2000).map(|_| rng.gen_range(0..2) as u8).collect();
        let a = auc(&scores, &labels).unwrap();
        assert!((0.45..=0.55).contains(&a), "null auc {a}");
    }

    #[test]
    fn tables_cover_all_axes() {
        let r = |variant, auc| EvalReport {
            run_id: "x".into(),
            variant,
            intra_audio_pool: PoolMethod::Max,
            cross_modal_pool: PoolMethod::Sum,
            n_mels: 80,
            k_shot: 100,
            seed: 0,
            auc,
            n_pos: 10,
            n_neg: 10,
            wall_secs: 0.0,
        };
        let reports = vec![
            r(Variant::DualLora, 0.8),
            r(Variant::DualLora, 0.9),
            r(Variant::TextOnlyLora, 0.7),
        ];
        let tables = render_tables(&reports);
        let t = &tables["table_variants.md"];
        assert!(t.contains("dual_lora") && t.contains("0.8500"));
        assert!(t.contains("text_only_lora"));
        assert!(tables.contains_key("table_mels.csv"));
        assert!(tables.contains_key("table_pooling.md"));
    }
}
