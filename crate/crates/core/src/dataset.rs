//! Emotion labels, corpus manifests, filename conventions, stratified
//! splitting and the synthetic desk-scale corpus.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::audio::{self, AudioClip};
use crate::error::{Error, Result};
use crate::rng::{self, domain};

pub const N_CLASSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EmotionLabel {
    Neutral = 0,
    Calm = 1,
    Happy = 2,
    Sad = 3,
    Angry = 4,
    Fearful = 5,
    Disgust = 6,
    Surprised = 7,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; N_CLASSES] = [
        EmotionLabel::Neutral,
        EmotionLabel::Calm,
        EmotionLabel::Happy,
        EmotionLabel::Sad,
        EmotionLabel::Angry,
        EmotionLabel::Fearful,
        EmotionLabel::Disgust,
        EmotionLabel::Surprised,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Calm => "calm",
            EmotionLabel::Happy => "happy",
            EmotionLabel::Sad => "sad",
            EmotionLabel::Angry => "angry",
            EmotionLabel::Fearful => "fearful",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Surprised => "surprised",
        }
    }

    pub fn one_hot(self) -> Vec<f64> {
        let mut v = vec![0.0; N_CLASSES];
        v[self.code()] = 1.0;
        v
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::InvalidConfig(format!(
                        concat!("unknown ", stringify!($name), " {:?}"), other
                    ))),
                }
            }
        }
    };
}

text_enum!(Corpus {
    Ravdess => "ravdess",
    Savee => "savee",
    Synthetic => "synthetic",
});

text_enum!(Split {
    Train => "train",
    Val => "val",
    Test => "test",
    Unassigned => "unassigned",
});

text_enum!(SplitMode {
    Random => "random",
    ByActor => "by-actor",
});

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: EmotionLabel,
    pub actor_id: String,
    pub corpus: Corpus,
    pub split: Split,
}

/// Entries plus the seed of the split that assigned them, if any.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub split_seed: Option<u64>,
}

const MANIFEST_HEADER: [&str; 5] = ["path", "label", "actor", "corpus", "split"];

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Manifest {
            entries,
            split_seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// CSV text. A split seed is recorded as a leading `# split_seed=N`
    /// comment line.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut out = String::new();
        if let Some(seed) = self.split_seed {
            out.push_str(&format!("# split_seed={seed}\n"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER)?;
        for e in &self.entries {
            w.write_record([
                e.path.as_str(),
                e.label.name(),
                e.actor_id.as_str(),
                e.corpus.as_str(),
                e.split.as_str(),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::io("<manifest>", e.into_error()))?;
        out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let split_seed = text
            .lines()
            .take_while(|l| l.starts_with('#'))
            .find_map(|l| l.trim_start_matches('#').trim().strip_prefix("split_seed="))
            .map(|v| {
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::InvalidConfig(format!("bad split seed {v:?}")))
            })
            .transpose()?;
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::InvalidConfig(format!(
                "manifest header must be {}",
                MANIFEST_HEADER.join(",")
            )));
        }
        let mut entries = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let path = rec[0].to_string();
            if path.is_empty() {
                return Err(Error::InvalidConfig("manifest entry with empty path".into()));
            }
            entries.push(ManifestEntry {
                path,
                label: rec[1].parse()?,
                actor_id: rec[2].to_string(),
                corpus: rec[3].parse()?,
                split: rec[4].parse()?,
            });
        }
        Ok(Manifest {
            entries,
            split_seed,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text)
    }
}

/// Resolve a manifest path relative to the directory holding the manifest.
pub fn resolve_path(manifest_dir: &Path, entry_path: &str) -> PathBuf {
    let p = Path::new(entry_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_dir.join(p)
    }
}

/// Filename code to label mapping, loaded from `code=label` lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeTable {
    entries: Vec<(String, EmotionLabel)>,
}

pub const DEFAULT_RAVDESS_TABLE: &str = include_str!("../config/ravdess_codes.txt");
pub const DEFAULT_SAVEE_TABLE: &str = include_str!("../config/savee_codes.txt");

impl CodeTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (code, label) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected code=label", lineno + 1))
            })?;
            entries.push((code.trim().to_string(), label.trim().parse()?));
        }
        Ok(CodeTable { entries })
    }

    pub fn ravdess_default() -> Self {
        Self::parse(DEFAULT_RAVDESS_TABLE).expect("bundled RAVDESS table parses")
    }

    pub fn savee_default() -> Self {
        Self::parse(DEFAULT_SAVEE_TABLE).expect("bundled SAVEE table parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn lookup(&self, code: &str) -> Option<EmotionLabel> {
        self.entries
            .iter()
            .rev()
            .find(|(c, _)| c == code)
            .map(|(_, l)| *l)
    }

    /// Label of the longest code that prefixes `text`.
    pub fn longest_prefix(&self, text: &str) -> Option<EmotionLabel> {
        self.entries
            .iter()
            .filter(|(c, _)| !c.is_empty() && text.starts_with(c.as_str()))
            .max_by_key(|(c, _)| c.len())
            .map(|(_, l)| *l)
    }
}

fn file_stem(name: &str) -> &str {
    let base = name.rsplit(['/', '\\']).next().unwrap_or(name);
    base.rsplit_once('.').map_or(base, |(stem, _)| stem)
}

/// `MM-VC-EE-II-SS-RR-AA.wav`: emotion is field three, actor field seven.
pub fn parse_ravdess_filename(name: &str, table: &CodeTable) -> Result<(EmotionLabel, String)> {
    let stem = file_stem(name);
    let fields: Vec<&str> = stem.split('-').collect();
    let well_formed = fields.len() == 7
        && fields
            .iter()
            .all(|f| f.len() == 2 && f.bytes().all(|b| b.is_ascii_digit()));
    if !well_formed {
        return Err(Error::BadFilename(name.to_string()));
    }
    let label = table
        .lookup(fields[2])
        .ok_or_else(|| Error::UnknownEmotionCode {
            code: fields[2].to_string(),
            name: name.to_string(),
        })?;
    Ok((label, fields[6].to_string()))
}

/// `AA_pNN.wav`: actor initials, underscore, emotion prefix, sentence number.
pub fn parse_savee_filename(name: &str, table: &CodeTable) -> Result<(EmotionLabel, String)> {
    let stem = file_stem(name);
    let (actor, rest) = stem
        .split_once('_')
        .filter(|(a, r)| !a.is_empty() && !r.is_empty())
        .ok_or_else(|| Error::BadFilename(name.to_string()))?;
    let label = table
        .longest_prefix(rest)
        .ok_or_else(|| Error::UnknownEmotionCode {
            code: rest.trim_end_matches(|c: char| c.is_ascii_digit()).to_string(),
            name: name.to_string(),
        })?;
    Ok((label, actor.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.90,
            val_frac: 0.05,
            test_frac: 0.05,
            seed: 42,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|f| !(*f >= 0.0)) {
            return Err(Error::InvalidConfig("split fractions must be >= 0".into()));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("split fractions must sum to 1".into()));
        }
        Ok(())
    }

    /// Per-class (train, val, test) counts; rounding remainder goes to train.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let val = ((self.val_frac * n as f64).round() as usize).min(n);
        let test = ((self.test_frac * n as f64).round() as usize).min(n - val);
        (n - val - test, val, test)
    }
}

/// Per-class seeded shuffle, then partition by rounded fractions.
pub fn stratified_split(entries: &[ManifestEntry], spec: &SplitSpec) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    if entries.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let mut out = entries.to_vec();
    let mut rng = rng::seeded(spec.seed, domain::SPLIT);
    for label in EmotionLabel::ALL {
        let mut idx: Vec<usize> = (0..out.len()).filter(|&i| out[i].label == label).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let (_, n_val, n_test) = spec.counts(idx.len());
        for (rank, &i) in idx.iter().enumerate() {
            out[i].split = if rank < n_val {
                Split::Val
            } else if rank < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    Ok(out)
}

/// Speaker-disjoint split: whole actors are dealt to val, then test, until
/// each reaches its target share of entries; the rest train.
pub fn split_by_actor(entries: &[ManifestEntry], spec: &SplitSpec) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    if entries.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let mut by_actor: BTreeMap<(Corpus, &str), usize> = BTreeMap::new();
    for e in entries {
        *by_actor.entry((e.corpus, e.actor_id.as_str())).or_default() += 1;
    }
    let mut actors: Vec<((Corpus, &str), usize)> = by_actor.into_iter().collect();
    actors.shuffle(&mut rng::seeded(spec.seed, domain::SPLIT));
    let (_, want_val, want_test) = spec.counts(entries.len());
    let mut assign: BTreeMap<(Corpus, &str), Split> = BTreeMap::new();
    let (mut got_val, mut got_test) = (0, 0);
    for (key, count) in actors {
        let split = if got_val < want_val {
            got_val += count;
            Split::Val
        } else if got_test < want_test {
            got_test += count;
            Split::Test
        } else {
            Split::Train
        };
        assign.insert(key, split);
    }
    Ok(entries
        .iter()
        .map(|e| ManifestEntry {
            split: assign[&(e.corpus, e.actor_id.as_str())],
            ..e.clone()
        })
        .collect())
}

pub fn split_manifest(manifest: &Manifest, spec: &SplitSpec, mode: SplitMode) -> Result<Manifest> {
    let entries = match mode {
        SplitMode::Random => stratified_split(&manifest.entries, spec)?,
        SplitMode::ByActor => split_by_actor(&manifest.entries, spec)?,
    };
    Ok(Manifest {
        entries,
        split_seed: Some(spec.seed),
    })
}

/// Exact per-class counts, indexed by label code.
pub fn class_histogram(entries: &[ManifestEntry]) -> [usize; N_CLASSES] {
    let mut h = [0; N_CLASSES];
    for e in entries {
        h[e.label.code()] += 1;
    }
    h
}

pub fn histogram_csv(hist: &[usize; N_CLASSES]) -> String {
    let mut s = String::from("label,count\n");
    for label in EmotionLabel::ALL {
        s.push_str(&format!("{},{}\n", label.name(), hist[label.code()]));
    }
    s
}

/// Scan RAVDESS and/or SAVEE directory trees for `.wav` files. Paths are
/// stored relative to `base` when possible.
pub fn scan_corpus(
    root: &Path,
    corpus: Corpus,
    table: &CodeTable,
    base: &Path,
) -> Result<(Vec<ManifestEntry>, Vec<(PathBuf, Error)>)> {
    let mut files = Vec::new();
    collect_wavs(root, &mut files)?;
    files.sort();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for f in files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let parsed = match corpus {
            Corpus::Ravdess => parse_ravdess_filename(name, table),
            Corpus::Savee => parse_savee_filename(name, table).or_else(|err| {
                // original SAVEE layout keeps actors in directories: DC/a01.wav
                let actor = f
                    .parent()
                    .and_then(|p| p.file_name())
                    .and_then(|n| n.to_str())
                    .unwrap_or_default();
                parse_savee_filename(&format!("{actor}_{name}"), table).map_err(|_| err)
            }),
            Corpus::Synthetic => Err(Error::InvalidConfig("synthetic corpora are generated, not scanned".into())),
        };
        match parsed {
            Ok((label, actor_id)) => {
                let rel = f.strip_prefix(base).unwrap_or(&f);
                entries.push(ManifestEntry {
                    path: rel.to_string_lossy().into_owned(),
                    label,
                    actor_id,
                    corpus,
                    split: Split::Unassigned,
                });
            }
            Err(e) => failures.push((f, e)),
        }
    }
    Ok((entries, failures))
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        {
            out.push(path);
        }
    }
    Ok(())
}

/// Generator parameters for one synthetic class.
pub fn synthetic_tone(code: usize) -> (f64, f64) {
    let f0 = 150.0 * (1.0 + 0.35 * code as f64);
    let am = 1.0 + code as f64;
    (f0, am)
}

/// One synthetic clip: an amplitude-modulated sine plus Gaussian noise
/// 30 dB below the tone, 2-4 s long.
pub fn synthesize_clip(code: usize, seed: u64, index: u64, sample_rate_hz: u32) -> AudioClip {
    use std::f64::consts::TAU;
    let mut rng = rng::item_stream(seed, index, domain::SYNTH);
    let (f0, am) = synthetic_tone(code);
    let seconds = rng.random_range(2.0..4.0);
    let n = (seconds * sample_rate_hz as f64).round() as usize;
    let phase = rng.random_range(0.0..TAU);
    let am_phase = rng.random_range(0.0..TAU);
    let sr = sample_rate_hz as f64;
    let tone: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            0.5 * (0.6 + 0.4 * (TAU * am * t + am_phase).sin()) * (TAU * f0 * t + phase).sin()
        })
        .collect();
    let power = tone.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let noise = Normal::new(0.0, (power * 1e-3).sqrt()).expect("finite noise level");
    let samples = tone
        .iter()
        .map(|&v| (v + noise.sample(&mut rng)).clamp(-1.0, 1.0) as f32)
        .collect();
    AudioClip {
        samples,
        sample_rate_hz,
        source_path: None,
    }
}

/// Write `clips_per_class` WAVs per class into `out_dir` and return the
/// manifest (paths relative to `out_dir`).
pub fn generate_synthetic_corpus(
    out_dir: &Path,
    clips_per_class: usize,
    seed: u64,
    sample_rate_hz: u32,
) -> Result<Manifest> {
    if clips_per_class == 0 {
        return Err(Error::InvalidConfig("clips_per_class must be at least 1".into()));
    }
    let audio_dir = out_dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let jobs: Vec<(EmotionLabel, usize)> = EmotionLabel::ALL
        .iter()
        .flat_map(|&l| (0..clips_per_class).map(move |i| (l, i)))
        .collect();
    jobs.par_iter()
        .enumerate()
        .map(|(index, &(label, i))| {
            let clip = synthesize_clip(label.code(), seed, index as u64, sample_rate_hz);
            let path = audio_dir.join(format!("synth_{}_{}_{i:04}.wav", label.code(), label.name()));
            audio::write_wav(&path, &clip)
        })
        .collect::<Result<Vec<()>>>()?;
    let entries = jobs
        .iter()
        .map(|&(label, i)| ManifestEntry {
            path: format!("audio/synth_{}_{}_{i:04}.wav", label.code(), label.name()),
            label,
            actor_id: format!("spk{}", i % 4),
            corpus: Corpus::Synthetic,
            split: Split::Unassigned,
        })
        .collect();
    Ok(Manifest::new(entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(label: EmotionLabel, i: usize) -> ManifestEntry {
        ManifestEntry {
            path: format!("clip{i}.wav"),
            label,
            actor_id: format!("a{}", i % 6),
            corpus: Corpus::Synthetic,
            split: Split::Unassigned,
        }
    }

    #[test]
    fn label_codes_are_stable() {
        for (i, l) in EmotionLabel::ALL.iter().enumerate() {
            assert_eq!(l.code(), i);
            assert_eq!(EmotionLabel::from_code(i), Some(*l));
            assert_eq!(l.name().parse::<EmotionLabel>().unwrap(), *l);
        }
        assert_eq!(EmotionLabel::from_code(8), None);
        assert!("joy".parse::<EmotionLabel>().is_err());
    }

    #[test]
    fn ravdess_names() {
        let table = CodeTable::ravdess_default();
        assert_eq!(
            parse_ravdess_filename("03-01-03-01-02-01-12.wav", &table).unwrap(),
            (EmotionLabel::Happy, "12".to_string())
        );
        assert!(matches!(
            parse_ravdess_filename("oops.wav", &table),
            Err(Error::BadFilename(_))
        ));
        assert!(matches!(
            parse_ravdess_filename("03-01-09-01-02-01-12.wav", &table),
            Err(Error::UnknownEmotionCode { .. })
        ));
        let edited = CodeTable::parse(&format!("{DEFAULT_RAVDESS_TABLE}\n99=calm\n")).unwrap();
        assert_eq!(
            parse_ravdess_filename("03-01-99-01-01-01-01.wav", &edited).unwrap(),
            (EmotionLabel::Calm, "01".to_string())
        );
    }

    #[test]
    fn savee_names() {
        let table = CodeTable::savee_default();
        assert_eq!(
            parse_savee_filename("DC_a01.wav", &table).unwrap(),
            (EmotionLabel::Angry, "DC".to_string())
        );
        assert_eq!(
            parse_savee_filename("DC_su05.wav", &table).unwrap(),
            (EmotionLabel::Surprised, "DC".to_string())
        );
        assert_eq!(
            parse_savee_filename("JK_sa12.wav", &table).unwrap().0,
            EmotionLabel::Sad
        );
        assert!(matches!(
            parse_savee_filename("DC_x01.wav", &table),
            Err(Error::UnknownEmotionCode { .. })
        ));
        assert!(matches!(
            parse_savee_filename("a01.wav", &table),
            Err(Error::BadFilename(_))
        ));
        // SAVEE never yields calm with the bundled table
        for code in ["a", "d", "f", "h", "n", "sa", "su"] {
            assert_ne!(table.longest_prefix(code), Some(EmotionLabel::Calm));
        }
    }

    #[test]
    fn code_table_rejects_garbage() {
        assert!(CodeTable::parse("01 neutral").is_err());
        assert!(CodeTable::parse("01=joy").is_err());
        assert!(CodeTable::parse("# only a comment\n\n").is_ok());
    }

    #[test]
    fn hundred_of_one_class() {
        let entries: Vec<_> = (0..100).map(|i| entry(EmotionLabel::Sad, i)).collect();
        let out = stratified_split(&entries, &SplitSpec::default()).unwrap();
        let count = |s| out.iter().filter(|e| e.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (90, 5, 5));
    }

    #[test]
    fn singletons_go_to_train() {
        let entries: Vec<_> = EmotionLabel::ALL.iter().enumerate().map(|(i, &l)| entry(l, i)).collect();
        let out = stratified_split(&entries, &SplitSpec::default()).unwrap();
        assert!(out.iter().all(|e| e.split == Split::Train));
    }

    #[test]
    fn seeds_change_assignment_not_counts() {
        let entries: Vec<_> = (0..160).map(|i| entry(EmotionLabel::ALL[i % 8], i)).collect();
        let spec = SplitSpec::default();
        let a = stratified_split(&entries, &spec).unwrap();
        let b = stratified_split(&entries, &spec).unwrap();
        assert_eq!(a, b);
        let c = stratified_split(&entries, &SplitSpec { seed: 7, ..spec }).unwrap();
        assert_ne!(a, c);
        for label in EmotionLabel::ALL {
            for split in [Split::Train, Split::Val, Split::Test] {
                let n = |v: &[ManifestEntry]| v.iter().filter(|e| e.label == label && e.split == split).count();
                assert_eq!(n(&a), n(&c));
            }
        }
    }

    #[test]
    fn empty_manifest_and_bad_split_fractions() {
        assert!(matches!(
            stratified_split(&[], &SplitSpec::default()),
            Err(Error::EmptyManifest)
        ));
        let bad = SplitSpec {
            train_frac: 0.5,
            ..SplitSpec::default()
        };
        assert!(stratified_split(&[entry(EmotionLabel::Calm, 0)], &bad).is_err());
    }

    #[test]
    fn actor_split_is_speaker_disjoint() {
        let entries: Vec<_> = (0..240).map(|i| entry(EmotionLabel::ALL[i % 8], i)).collect();
        let out = split_by_actor(&entries, &SplitSpec::default()).unwrap();
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &out {
            let prev = seen.insert(e.actor_id.as_str(), e.split);
            assert!(prev.is_none() || prev == Some(e.split));
        }
        assert!(out.iter().any(|e| e.split == Split::Val));
    }

    #[test]
    fn histogram_and_csv() {
        assert_eq!(class_histogram(&[]), [0; 8]);
        let entries: Vec<_> = (0..20).map(|i| entry(EmotionLabel::ALL[i % 3], i)).collect();
        let h = class_histogram(&entries);
        assert_eq!(h.iter().sum::<usize>(), 20);
        assert_eq!(h[0], 7);
        let csv = histogram_csv(&h);
        assert!(csv.starts_with("label,count\nneutral,7\ncalm,7\nhappy,6\n"));
    }

    #[test]
    fn manifest_csv_roundtrip() {
        let mut m = Manifest::new(vec![entry(EmotionLabel::Fearful, 1), entry(EmotionLabel::Calm, 2)]);
        m.entries[0].path = "dir with, comma/x.wav".into();
        m.split_seed = Some(99);
        let text = m.to_csv_string().unwrap();
        assert!(text.starts_with("# split_seed=99\npath,label,actor,corpus,split\n"));
        assert_eq!(Manifest::from_csv_str(&text).unwrap(), m);
        assert!(Manifest::from_csv_str("a,b\n1,2\n").is_err());
    }

    #[test]
    fn synthetic_corpus_contract() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_corpus(dir.path(), 2, 5, 16000).unwrap();
        assert_eq!(m.len(), 16);
        assert_eq!(class_histogram(&m.entries), [2; 8]);
        let first = fs::read(dir.path().join(&m.entries[0].path)).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(dir2.path(), 2, 5, 16000).unwrap();
        assert_eq!(fs::read(dir2.path().join(&m.entries[0].path)).unwrap(), first);
        for e in &m.entries {
            let clip = audio::decode_wav(&dir.path().join(&e.path)).unwrap();
            let secs = clip.duration_secs();
            assert!((2.0..=4.0).contains(&secs), "{secs}");
        }
        assert!(generate_synthetic_corpus(dir.path(), 0, 5, 16000).is_err());
    }

    proptest! {
        #[test]
        fn split_partitions_and_stratifies(
            counts in prop::collection::vec(0usize..60, 8),
            seed in any::<u64>(),
            val in 0.0f64..0.4,
            test in 0.0f64..0.4,
        ) {
            let entries: Vec<_> = counts
                .iter()
                .enumerate()
                .flat_map(|(c, &n)| (0..n).map(move |i| entry(EmotionLabel::ALL[c], i)))
                .collect();
            prop_assume!(!entries.is_empty());
            let spec = SplitSpec { train_frac: 1.0 - val - test, val_frac: val, test_frac: test, seed };
            let out = stratified_split(&entries, &spec).unwrap();
            prop_assert_eq!(out.len(), entries.len());
            prop_assert!(out.iter().all(|e| e.split != Split::Unassigned));
            for (c, &n) in counts.iter().enumerate() {
                for (split, frac) in [(Split::Train, spec.train_frac), (Split::Val, val), (Split::Test, test)] {
                    let got = out.iter().filter(|e| e.label.code() == c && e.split == split).count();
                    prop_assert!((got as f64 - frac * n as f64).abs() <= 1.0 + 1e-9);
                }
            }
            prop_assert_eq!(class_histogram(&out).iter().sum::<usize>(), out.len());
        }
    }
}
