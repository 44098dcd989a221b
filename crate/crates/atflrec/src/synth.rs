//! Synthetic multimodal interaction worlds with a known, tunable signal,
//! plus JSONL dataset loading, splits, and K-shot sampling.
//!
//! Each item belongs to a latent class. Classes show up in titles (word
//! pools) at `text_signal_strength` and in audio (sinusoid mixtures) at
//! `audio_signal_strength`; labels follow a Bernoulli of the user's class
//! affinity scaled by the mean signal strength, so at zero strength labels
//! are independent of item content.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{fbank, load_wav, read_fbk, write_fbk, AudioError, FbankConfig, FbankMatrix};
use crate::model::RecSample;
use crate::rng::derive;
use crate::text::{build_instruction, tokenize, HistoryEntry, InteractionRecord, RenderStats, TitleLookup, Vocabulary};

/// Label sharpness: affinity = AFFINITY_SCALE * signal * (+-1 preference).
const AFFINITY_SCALE: f64 = 4.0;
/// Fraction of title word slots drawn from the class pool at full text
/// strength; the remainder comes from the shared pool.
const TITLE_CLASS_RATE: f64 = 0.75;
const TITLE_WORDS: usize = 4;
const CLASS_POOL: usize = 12;
const SHARED_POOL: usize = 30;

#[rustfmt::skip]
const WORD_LIST: [&str; 150] = [
    // shared pool (first 30)
    "the", "night", "video", "live", "official", "new", "best", "mix", "session", "vibes",
    "sound", "beat", "track", "cover", "remix", "show", "world", "time", "life", "day",
    "light", "dream", "heart", "city", "road", "fire", "gold", "wave", "star", "moon",
    // class pools, 12 words each
    "neon", "circuit", "glitch", "pixel", "synth", "laser", "chrome", "binary", "static", "voltage", "modem", "arcade",
    "meadow", "willow", "creek", "fern", "bloom", "orchard", "clover", "brook", "petal", "grove", "moss", "dew",
    "anchor", "harbor", "tide", "sail", "coral", "drift", "lagoon", "pearl", "breeze", "current", "reef", "shore",
    "ember", "ash", "forge", "molten", "cinder", "blaze", "furnace", "scorch", "flare", "kindle", "torch", "smolder",
    "frost", "glacier", "tundra", "blizzard", "icicle", "polar", "sleet", "crystal", "arctic", "shiver", "hail", "snowfall",
    "dune", "mirage", "oasis", "scarab", "sandstorm", "cactus", "canyon", "mesa", "nomad", "sahara", "sunbaked", "adobe",
    "summit", "ridge", "alpine", "crag", "boulder", "peak", "ledge", "scree", "cliff", "plateau", "ravine", "cairn",
    "comet", "nebula", "orbit", "quasar", "cosmic", "stellar", "galaxy", "eclipse", "meteor", "pulsar", "nova", "zenith",
    "gears", "brass", "steam", "clockwork", "copper", "rivet", "piston", "boiler", "cog", "valve", "turbine", "flywheel",
    "velvet", "satin", "lace", "silk", "brocade", "taffeta", "chiffon", "linen", "damask", "suede", "tweed", "organza",
];

#[derive(Debug)]
pub enum SynthError {
    Io(std::io::Error),
    Audio(AudioError),
    Json { line: usize, what: String },
    /// History/target items that do not exist in the item table.
    Integrity { offenders: Vec<String> },
    /// A record whose target also appears in its history.
    TargetInHistory { line: usize, target: String },
    BadLabel { line: usize, label: u8 },
    KShot { k: usize, available: usize },
    Config(String),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::Audio(e) => write!(f, "audio error: {e}"),
            Self::Json { line, what } => write!(f, "line {line}: {what}"),
            Self::Integrity { offenders } => {
                write!(f, "dangling item ids: {}", offenders.join(", "))
            }
            Self::TargetInHistory { line, target } => {
                write!(f, "line {line}: target {target} appears in its own history")
            }
            Self::BadLabel { line, label } => write!(f, "line {line}: label {label} not in {{0,1}}"),
            Self::KShot { k, available } => {
                write!(f, "k-shot size {k} exceeds split size {available}")
            }
            Self::Config(msg) => write!(f, "world spec: {msg}"),
        }
    }
}

impl std::error::Error for SynthError {}

impl From<std::io::Error> for SynthError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl From<AudioError> for SynthError {
    fn from(e: AudioError) -> Self {
        Self::Audio(e)
    }
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_latent_classes: usize,
    pub audio_signal_strength: f64,
    pub text_signal_strength: f64,
    pub seed: u64,
    pub interactions_per_user: usize,
    /// Rendered audio length per item, seconds.
    pub audio_seconds: f64,
    /// History entries carried by each interaction record.
    pub history_len: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_users: 200,
            n_items: 500,
            n_latent_classes: 4,
            audio_signal_strength: 1.0,
            text_signal_strength: 1.0,
            seed: 0,
            interactions_per_user: 20,
            audio_seconds: 0.6,
            history_len: 5,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let max_classes = (WORD_LIST.len() - SHARED_POOL) / CLASS_POOL;
        if self.n_latent_classes < 2 || self.n_latent_classes > max_classes {
            return Err(SynthError::Config(format!(
                "n_latent_classes {} outside 2..={max_classes}",
                self.n_latent_classes
            )));
        }
        for (name, s) in [
            ("audio_signal_strength", self.audio_signal_strength),
            ("text_signal_strength", self.text_signal_strength),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(SynthError::Config(format!("{name} {s} outside [0,1]")));
            }
        }
        if self.n_users == 0 || self.n_items == 0 || self.interactions_per_user == 0 {
            return Err(SynthError::Config("empty world".into()));
        }
        if self.interactions_per_user > self.n_items {
            return Err(SynthError::Config(format!(
                "interactions_per_user {} exceeds n_items {}",
                self.interactions_per_user, self.n_items
            )));
        }
        if self.audio_seconds <= 0.0 || self.audio_seconds > 30.0 {
            return Err(SynthError::Config(format!(
                "audio_seconds {} outside (0, 30]",
                self.audio_seconds
            )));
        }
        Ok(())
    }

    fn signal(&self) -> f64 {
        (self.audio_signal_strength + self.text_signal_strength) / 2.0
    }
}

/// Catalog entry, serialized one-per-line into items.jsonl.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ItemMeta {
    pub id: String,
    pub title: String,
    pub class: usize,
    pub audio: String,
}

#[derive(Debug, Clone)]
pub struct UserProfile {
    pub id: String,
    /// +1 / -1 per latent class.
    pub prefs: Vec<f64>,
}

pub struct World {
    pub spec: WorldSpec,
    pub items: Vec<ItemMeta>,
    pub users: Vec<UserProfile>,
    pub interactions: Vec<InteractionRecord>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pure function of (spec, seed-in-spec).
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let seed = spec.seed;

    let mut items = Vec::with_capacity(spec.n_items);
    for i in 0..spec.n_items {
        let class = i % spec.n_latent_classes;
        let mut rng = ChaCha20Rng::seed_from_u64(derive(seed, &format!("title-{i}")));
        let mut words = Vec::with_capacity(TITLE_WORDS);
        for _ in 0..TITLE_WORDS {
            let from_class = rng.gen::<f64>() < TITLE_CLASS_RATE * spec.text_signal_strength;
            let word = if from_class {
                WORD_LIST[SHARED_POOL + class * CLASS_POOL + rng.gen_range(0..CLASS_POOL)]
            } else {
                WORD_LIST[rng.gen_range(0..SHARED_POOL)]
            };
            words.push(word);
        }
        let id = format!("item_{i:05}");
        items.push(ItemMeta {
            audio: format!("audio/{id}.wav"),
            id,
            title: words.join(" "),
            class,
        });
    }

    let mut users = Vec::with_capacity(spec.n_users);
    for u in 0..spec.n_users {
        let mut rng = ChaCha20Rng::seed_from_u64(derive(seed, &format!("user-{u}")));
        let prefs = loop {
            let p: Vec<f64> = (0..spec.n_latent_classes)
                .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                .collect();
            if p.iter().any(|&v| v > 0.0) && p.iter().any(|&v| v < 0.0) {
                break p;
            }
        };
        users.push(UserProfile {
            id: format!("user_{u:04}"),
            prefs,
        });
    }

    // Per-user streams of distinct items with Bernoulli labels; the global
    // interaction order is round-major (round t across all users = time t).
    let mut streams: Vec<Vec<(usize, u8)>> = Vec::with_capacity(spec.n_users);
    for (u, user) in users.iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(derive(seed, &format!("labels-{u}")));
        let mut order: Vec<usize> = (0..spec.n_items).collect();
        order.shuffle(&mut rng);
        order.truncate(spec.interactions_per_user);
        let stream = order
            .into_iter()
            .map(|item| {
                let affinity = AFFINITY_SCALE * spec.signal() * user.prefs[items[item].class];
                let label = u8::from(rng.gen::<f64>() < sigmoid(affinity));
                (item, label)
            })
            .collect();
        streams.push(stream);
    }

    let mut interactions = Vec::with_capacity(spec.n_users * spec.interactions_per_user);
    for t in 0..spec.interactions_per_user {
        for (u, stream) in streams.iter().enumerate() {
            let (item, label) = stream[t];
            let from = t.saturating_sub(spec.history_len);
            let history = stream[from..t]
                .iter()
                .map(|&(prev, liked)| HistoryEntry {
                    item: items[prev].id.clone(),
                    liked: liked == 1,
                })
                .collect();
            interactions.push(InteractionRecord {
                user: users[u].id.clone(),
                history,
                target: items[item].id.clone(),
                label,
            });
        }
    }

    Ok(World {
        spec: spec.clone(),
        items,
        users,
        interactions,
    })
}

/// The 3 sinusoid frequencies expressing a latent class.
pub fn class_frequencies(class: usize) -> [f64; 3] {
    [
        350.0 + 130.0 * (3 * class) as f64,
        350.0 + 130.0 * (3 * class + 1) as f64,
        350.0 + 130.0 * (3 * class + 2) as f64,
    ]
}

/// Render one item's waveform at 16 kHz: class sinusoids at the audio
/// signal strength over white noise. Deterministic in (spec.seed, index).
pub fn render_item_audio(spec: &WorldSpec, item_index: usize, class: usize) -> Vec<f64> {
    let rate = crate::audio::TARGET_SAMPLE_RATE as f64;
    let n = (spec.audio_seconds * rate).round() as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(derive(spec.seed, &format!("audio-{item_index}")));
    let freqs = class_frequencies(class);
    let phases: [f64; 3] = [
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    ];
    let s = spec.audio_signal_strength;
    let noise_amp = 1.0 - 0.7 * s;
    (0..n)
        .map(|t| {
            let time = t as f64 / rate;
            let mix: f64 = freqs
                .iter()
                .zip(&phases)
                .map(|(f, p)| (std::f64::consts::TAU * f * time + p).sin())
                .sum::<f64>()
                / 3.0;
            let noise = rng.gen_range(-1.0..1.0);
            0.45 * (s * mix + noise_amp * noise)
        })
        .collect()
}

impl World {
    pub fn user_index(&self) -> HashMap<&str, usize> {
        self.users.iter().enumerate().map(|(i, u)| (u.id.as_str(), i)).collect()
    }

    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.items.iter().enumerate().map(|(i, it)| (it.id.as_str(), i)).collect()
    }

    /// Bayes score from the generative parameters: the probability the
    /// user likes the item's class at the configured signal strength.
    pub fn oracle_score(&self, user: &str, item: &str) -> Option<f64> {
        let u = self.users.iter().find(|u| u.id == user)?;
        let it = self.items.iter().find(|i| i.id == item)?;
        Some(sigmoid(AFFINITY_SCALE * self.spec.signal() * u.prefs[it.class]))
    }

    /// (oracle score, label) pairs over a set of interactions.
    pub fn oracle_scores(&self, interactions: &[InteractionRecord]) -> Vec<(f64, u8)> {
        let users = self.user_index();
        let items = self.item_index();
        interactions
            .iter()
            .map(|r| {
                let u = &self.users[users[r.user.as_str()]];
                let it = &self.items[items[r.target.as_str()]];
                (
                    sigmoid(AFFINITY_SCALE * self.spec.signal() * u.prefs[it.class]),
                    r.label,
                )
            })
            .collect()
    }
}

/// Time-ordered 80/10/10 split by interaction.
pub fn split_interactions(
    interactions: &[InteractionRecord],
) -> (Vec<InteractionRecord>, Vec<InteractionRecord>, Vec<InteractionRecord>) {
    let n = interactions.len();
    let train_end = n * 8 / 10;
    let val_end = n * 9 / 10;
    (
        interactions[..train_end].to_vec(),
        interactions[train_end..val_end].to_vec(),
        interactions[val_end..].to_vec(),
    )
}

/// Uniform sample of K records without replacement, label-stratified to
/// within one record of the split's positive rate.
pub fn kshot_sample(
    interactions: &[InteractionRecord],
    k: usize,
    seed: u64,
) -> Result<Vec<InteractionRecord>> {
    if k > interactions.len() {
        return Err(SynthError::KShot {
            k,
            available: interactions.len(),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(derive(seed, "kshot"));
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, r) in interactions.iter().enumerate() {
        if r.label == 1 {
            pos.push(i)
        } else {
            neg.push(i)
        }
    }
    let rate = pos.len() as f64 / interactions.len() as f64;
    let want_pos = ((k as f64 * rate).round() as usize)
        .min(pos.len())
        .max(k.saturating_sub(neg.len()));
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut chosen: Vec<usize> = pos[..want_pos].to_vec();
    chosen.extend_from_slice(&neg[..k - want_pos]);
    chosen.shuffle(&mut rng);
    Ok(chosen.into_iter().map(|i| interactions[i].clone()).collect())
}

/// Write items.jsonl, interactions.jsonl, world.json, and per-item WAVs.
pub fn emit_world(world: &World, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir.join("audio"))?;
    let mut items = std::fs::File::create(out_dir.join("items.jsonl"))?;
    for item in &world.items {
        writeln!(items, "{}", serde_json::to_string(item).unwrap())?;
    }
    let mut inter = std::fs::File::create(out_dir.join("interactions.jsonl"))?;
    for r in &world.interactions {
        writeln!(inter, "{}", serde_json::to_string(r).unwrap())?;
    }
    let doc = serde_json::json!({
        "spec": world.spec,
        "fingerprint": crate::report::fingerprint_of(&world.spec),
    });
    std::fs::write(out_dir.join("world.json"), serde_json::to_string_pretty(&doc).unwrap())?;
    for (i, item) in world.items.iter().enumerate() {
        let samples = render_item_audio(&world.spec, i, item.class);
        crate::audio::write_wav_pcm16(
            out_dir.join(&item.audio),
            &samples,
            crate::audio::TARGET_SAMPLE_RATE,
        )?;
    }
    Ok(())
}

/// A loaded dataset: item catalog plus validated interactions.
pub struct Dataset {
    pub items: Vec<ItemMeta>,
    pub by_id: HashMap<String, usize>,
    pub interactions: Vec<InteractionRecord>,
    pub root: PathBuf,
}

impl TitleLookup for Dataset {
    fn title(&self, item: &str) -> Option<&str> {
        self.by_id.get(item).map(|&i| self.items[i].title.as_str())
    }
}

/// Load items.jsonl + interactions.jsonl from a dataset directory and
/// validate referential integrity.
pub fn load_interactions(dir: &Path) -> Result<Dataset> {
    let mut items = Vec::new();
    let reader = BufReader::new(std::fs::File::open(dir.join("items.jsonl"))?);
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: ItemMeta = serde_json::from_str(&line).map_err(|e| SynthError::Json {
            line: n + 1,
            what: e.to_string(),
        })?;
        items.push(item);
    }
    let by_id: HashMap<String, usize> =
        items.iter().enumerate().map(|(i, it)| (it.id.clone(), i)).collect();

    let mut interactions = Vec::new();
    let reader = BufReader::new(std::fs::File::open(dir.join("interactions.jsonl"))?);
    let mut offenders: Vec<String> = Vec::new();
    let mut seen_offenders: HashSet<String> = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InteractionRecord = serde_json::from_str(&line).map_err(|e| SynthError::Json {
            line: n + 1,
            what: e.to_string(),
        })?;
        if rec.label > 1 {
            return Err(SynthError::BadLabel {
                line: n + 1,
                label: rec.label,
            });
        }
        if rec.history.iter().any(|h| h.item == rec.target) {
            return Err(SynthError::TargetInHistory {
                line: n + 1,
                target: rec.target,
            });
        }
        for id in rec.history.iter().map(|h| &h.item).chain([&rec.target]) {
            if !by_id.contains_key(id) && seen_offenders.insert(id.clone()) {
                offenders.push(id.clone());
            }
        }
        interactions.push(rec);
    }
    if !offenders.is_empty() {
        return Err(SynthError::Integrity { offenders });
    }
    if interactions.is_empty() {
        log::warn!("{}: empty interactions file", dir.display());
    }
    Ok(Dataset {
        items,
        by_id,
        interactions,
        root: dir.to_path_buf(),
    })
}

/// Per-item FBank features, shared across samples.
pub struct FeatureStore {
    pub features: HashMap<String, Rc<FbankMatrix>>,
    pub n_mels: usize,
}

impl FeatureStore {
    /// Read cached FBK1 sidecars under `<root>/features/<n_mels>` when
    /// present; otherwise extract from the WAVs and write the cache.
    pub fn load_or_extract(dataset: &Dataset, cfg: &FbankConfig) -> Result<FeatureStore> {
        let dir = dataset.root.join("features").join(cfg.n_mels.to_string());
        std::fs::create_dir_all(&dir)?;
        let mut features = HashMap::new();
        for item in &dataset.items {
            let fbk_path = dir.join(format!("{}.fbk", item.id));
            let wav_path = dataset.root.join(&item.audio);
            let cached = cache_fresh(&fbk_path, &wav_path);
            let matrix = if cached {
                read_fbk(&fbk_path)?
            } else {
                let wave = load_wav(&wav_path)?;
                let m = fbank(&wave, cfg)?;
                write_fbk(&fbk_path, &m)?;
                m
            };
            features.insert(item.id.clone(), Rc::new(matrix));
        }
        Ok(FeatureStore {
            features,
            n_mels: cfg.n_mels,
        })
    }
}

fn cache_fresh(fbk: &Path, wav: &Path) -> bool {
    match (std::fs::metadata(fbk), std::fs::metadata(wav)) {
        (Ok(f), Ok(w)) => match (f.modified(), w.modified()) {
            (Ok(fm), Ok(wm)) => fm >= wm,
            _ => false,
        },
        _ => false,
    }
}

/// Render records into instruction-tuning samples. Audio features attach
/// only when `with_audio` is set (liked history plus target).
pub fn assemble_samples(
    records: &[InteractionRecord],
    dataset: &Dataset,
    vocab: &Vocabulary,
    features: Option<&FeatureStore>,
    stats: &mut RenderStats,
) -> Vec<RecSample> {
    records
        .iter()
        .map(|rec| {
            let text = build_instruction(rec, dataset, stats);
            let tokens = tokenize(&text, vocab);
            let (liked_items, liked_audio, target_audio) = match features {
                Some(store) => {
                    let mut ids = Vec::new();
                    let mut feats = Vec::new();
                    for h in rec.history.iter().filter(|h| h.liked) {
                        if let Some(f) = store.features.get(&h.item) {
                            ids.push(h.item.clone());
                            feats.push(Rc::clone(f));
                        }
                    }
                    (ids, feats, store.features.get(&rec.target).map(Rc::clone))
                }
                None => (Vec::new(), Vec::new(), None),
            };
            RecSample {
                user: rec.user.clone(),
                target_item: rec.target.clone(),
                text,
                tokens,
                liked_items,
                liked_audio,
                target_audio,
                label: rec.label,
            }
        })
        .collect()
}

/// The instruction corpus for vocabulary construction.
pub fn corpus_for_vocab(records: &[InteractionRecord], dataset: &Dataset) -> Vec<String> {
    let mut stats = RenderStats::default();
    records
        .iter()
        .map(|r| build_instruction(r, dataset, &mut stats))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::auc;

    fn spec(audio: f64, text: f64, seed: u64) -> WorldSpec {
        WorldSpec {
            audio_signal_strength: audio,
            text_signal_strength: text,
            seed,
            ..WorldSpec::default()
        }
    }

    fn oracle_auc(world: &World) -> f64 {
        let pairs = world.oracle_scores(&world.interactions);
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        auc(&scores, &labels).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(&spec(1.0, 1.0, 42)).unwrap();
        let b = generate_world(&spec(1.0, 1.0, 42)).unwrap();
        assert_eq!(a.items, b.items);
        assert_eq!(a.interactions, b.interactions);
        let wa = render_item_audio(&a.spec, 7, a.items[7].class);
        let wb = render_item_audio(&b.spec, 7, b.items[7].class);
        assert!(wa.iter().zip(&wb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zero_strength_oracle_is_chance() {
        // >= 10k label pairs: 4000 interactions with ~half positive
        let world = generate_world(&spec(0.0, 0.0, 3)).unwrap();
        let a = oracle_auc(&world);
        assert!((0.45..=0.55).contains(&a), "oracle auc {a}");
    }

    #[test]
    fn full_strength_oracle_exceeds_095() {
        let world = generate_world(&spec(1.0, 1.0, 4)).unwrap();
        let a = oracle_auc(&world);
        assert!(a >= 0.95, "oracle auc {a}");
    }

    #[test]
    fn oracle_auc_monotone_in_each_strength() {
        let grid = [0.0, 0.5, 1.0];
        for seeds in [[10u64, 11, 12, 13, 14]] {
            // audio axis at fixed text, and text axis at fixed audio
            for &fixed in &grid {
                let mut prev_audio = -1.0;
                let mut prev_text = -1.0;
                for &s in &grid {
                    let audio_avg: f64 = seeds
                        .iter()
                        .map(|&sd| oracle_auc(&generate_world(&spec(s, fixed, sd)).unwrap()))
                        .sum::<f64>()
                        / seeds.len() as f64;
                    assert!(
                        audio_avg >= prev_audio - 1e-9,
                        "audio axis not monotone at fixed {fixed}: {audio_avg} < {prev_audio}"
                    );
                    prev_audio = audio_avg;

                    let text_avg: f64 = seeds
                        .iter()
                        .map(|&sd| oracle_auc(&generate_world(&spec(fixed, s, sd)).unwrap()))
                        .sum::<f64>()
                        / seeds.len() as f64;
                    assert!(
                        text_avg >= prev_text - 1e-9,
                        "text axis not monotone at fixed {fixed}: {text_avg} < {prev_text}"
                    );
                    prev_text = text_avg;
                }
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_share_no_user_target_pair() {
        let world = generate_world(&spec(1.0, 1.0, 5)).unwrap();
        let (train, val, test) = split_interactions(&world.interactions);
        assert_eq!(train.len() + val.len() + test.len(), world.interactions.len());
        let key = |r: &InteractionRecord| (r.user.clone(), r.target.clone());
        let train_keys: HashSet<_> = train.iter().map(key).collect();
        let val_keys: HashSet<_> = val.iter().map(key).collect();
        let test_keys: HashSet<_> = test.iter().map(key).collect();
        assert!(train_keys.is_disjoint(&val_keys));
        assert!(train_keys.is_disjoint(&test_keys));
        assert!(val_keys.is_disjoint(&test_keys));
    }

    #[test]
    fn kshot_exact_count_and_stratification() {
        let world = generate_world(&spec(1.0, 1.0, 6)).unwrap();
        let (train, _, _) = split_interactions(&world.interactions);
        let rate = train.iter().filter(|r| r.label == 1).count() as f64 / train.len() as f64;
        for k in [100usize, 500] {
            let sample = kshot_sample(&train, k, 9).unwrap();
            assert_eq!(sample.len(), k);
            let pos = sample.iter().filter(|r| r.label == 1).count() as f64;
            assert!(
                (pos - k as f64 * rate).abs() <= 1.0,
                "stratification off: {pos} vs {}",
                k as f64 * rate
            );
        }
    }

    #[test]
    fn kshot_whole_split_is_a_shuffle() {
        let world = generate_world(&spec(1.0, 1.0, 7)).unwrap();
        let (train, _, _) = split_interactions(&world.interactions);
        let sample = kshot_sample(&train, train.len(), 1).unwrap();
        assert_eq!(sample.len(), train.len());
        let mut a: Vec<String> = sample.iter().map(|r| format!("{}:{}", r.user, r.target)).collect();
        let mut b: Vec<String> = train.iter().map(|r| format!("{}:{}", r.user, r.target)).collect();
        assert_ne!(a, b, "expected a shuffle, got identity order");
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn kshot_oversize_errors() {
        let world = generate_world(&spec(1.0, 1.0, 8)).unwrap();
        let (train, _, _) = split_interactions(&world.interactions);
        assert!(matches!(
            kshot_sample(&train, train.len() + 1, 0),
            Err(SynthError::KShot { .. })
        ));
    }

    #[test]
    fn kshot_two_seeds_overlap_near_hypergeometric() {
        let world = generate_world(&spec(1.0, 1.0, 9)).unwrap();
        let (train, _, _) = split_interactions(&world.interactions);
        let k = 100;
        let a: HashSet<String> = kshot_sample(&train, k, 1)
            .unwrap()
            .iter()
            .map(|r| format!("{}:{}", r.user, r.target))
            .collect();
        let b: HashSet<String> = kshot_sample(&train, k, 2)
            .unwrap()
            .iter()
            .map(|r| format!("{}:{}", r.user, r.target))
            .collect();
        let overlap = a.intersection(&b).count() as f64;
        let expected = (k * k) as f64 / train.len() as f64;
        // ~3.1 expected; allow generous sampling noise
        assert!(
            (overlap - expected).abs() < 4.0 * expected.sqrt() + 2.0,
            "overlap {overlap}, expected about {expected}"
        );
    }

    #[test]
    fn emit_and_load_roundtrip() {
        let tiny = WorldSpec {
            n_users: 6,
            n_items: 12,
            interactions_per_user: 5,
            audio_seconds: 0.1,
            seed: 77,
            ..WorldSpec::default()
        };
        let world = generate_world(&tiny).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_world(&world, dir.path()).unwrap();
        let dataset = load_interactions(dir.path()).unwrap();
        assert_eq!(dataset.items, world.items);
        assert_eq!(dataset.interactions, world.interactions);
        for item in &dataset.items {
            assert!(dir.path().join(&item.audio).exists());
        }
    }

    #[test]
    fn load_rejects_dangling_ids() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("items.jsonl"),
            "{\"id\":\"item_a\",\"title\":\"x\",\"class\":0,\"audio\":\"audio/a.wav\"}\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("interactions.jsonl"),
            "{\"user\":\"u\",\"history\":[{\"item\":\"ghost\",\"liked\":true}],\"target\":\"item_a\",\"label\":1}\n",
        )
        .unwrap();
        match load_interactions(dir.path()) {
            Err(SynthError::Integrity { offenders }) => assert_eq!(offenders, vec!["ghost"]),
            other => panic!("expected integrity error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn load_rejects_target_in_history() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("items.jsonl"),
            "{\"id\":\"item_a\",\"title\":\"x\",\"class\":0,\"audio\":\"audio/a.wav\"}\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("interactions.jsonl"),
            "{\"user\":\"u\",\"history\":[{\"item\":\"item_a\",\"liked\":true}],\"target\":\"item_a\",\"label\":0}\n",
        )
        .unwrap();
        assert!(matches!(
            load_interactions(dir.path()),
            Err(SynthError::TargetInHistory { line: 1, .. })
        ));
    }

    #[test]
    fn load_empty_interactions_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("items.jsonl"), "").unwrap();
        std::fs::write(dir.path().join("interactions.jsonl"), "").unwrap();
        let dataset = load_interactions(dir.path()).unwrap();
        assert!(dataset.interactions.is_empty());
    }

    #[test]
    fn well_formed_three_record_file_loads_three() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("items.jsonl"),
            "{\"id\":\"a\",\"title\":\"t a\",\"class\":0,\"audio\":\"audio/a.wav\"}\n\
             {\"id\":\"b\",\"title\":\"t b\",\"class\":1,\"audio\":\"audio/b.wav\"}\n",
        )
        .unwrap();
        let rec = "{\"user\":\"u\",\"history\":[{\"item\":\"a\",\"liked\":true}],\"target\":\"b\",\"label\":1}\n";
        std::fs::write(dir.path().join("interactions.jsonl"), rec.repeat(3)).unwrap();
        assert_eq!(load_interactions(dir.path()).unwrap().interactions.len(), 3);
    }

    #[test]
    fn rendered_audio_expresses_class_frequencies() {
        let s = spec(1.0, 1.0, 11);
        let samples = render_item_audio(&s, 0, 2);
        let wave = crate::audio::Waveform::new(samples, 16_000);
        let m = fbank(&wave, &FbankConfig::default()).unwrap();
        // energy at the class filters beats the background clearly
        let freqs = class_frequencies(2);
        let nyq_mel = crate::audio::hz_to_mel(8000.0);
        let hot: Vec<usize> = freqs
            .iter()
            .map(|&f| {
                let mel = crate::audio::hz_to_mel(f);
                ((mel / nyq_mel) * 81.0).round() as usize - 1
            })
            .collect();
        let mut hot_e = 0.0;
        let mut rest_e = 0.0;
        for frame in 0..m.frames {
            for (c, &v) in m.row(frame).iter().enumerate() {
                if hot.iter().any(|&h| c.abs_diff(h) <= 1) {
                    hot_e += v.exp();
                } else {
                    rest_e += v.exp();
                }
            }
        }
        assert!(hot_e > rest_e, "hot {hot_e} vs rest {rest_e}");
    }
}
