use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dimension::Dimension;
use crate::error::{io_err, Error, Result};
use crate::fsutil::write_jsonl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown split '{s}' (train|valid|test)")))
    }
}

/// One line of `metadata.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackMetadata {
    pub track_id: String,
    pub audio_path: String,
    pub genre: BTreeSet<String>,
    pub mood: BTreeSet<String>,
    pub instruments: BTreeSet<String>,
    pub tempo_bpm: f64,
    pub split: Split,
}

impl TrackMetadata {
    pub fn tags(&self, d: Dimension) -> Option<&BTreeSet<String>> {
        match d {
            Dimension::Genre => Some(&self.genre),
            Dimension::Mood => Some(&self.mood),
            Dimension::Instruments => Some(&self.instruments),
            Dimension::Tempo => None,
        }
    }
}

/// Allowed tag names per tag category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub genre: Vec<String>,
    pub mood: Vec<String>,
    pub instruments: Vec<String>,
}

fn parse_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

impl Vocabulary {
    /// The shipped generic vocabularies (28 genre, 12 mood, 5 instrument tags).
    pub fn builtin() -> Self {
        Self {
            genre: parse_list(include_str!("../../data/vocab/genre.txt")),
            mood: parse_list(include_str!("../../data/vocab/mood.txt")),
            instruments: parse_list(include_str!("../../data/vocab/instruments.txt")),
        }
    }

    /// Reads `genre.txt`, `mood.txt` and `instruments.txt` from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<String>> {
            let p = dir.join(name);
            Ok(parse_list(&std::fs::read_to_string(&p).map_err(io_err(&p))?))
        };
        Ok(Self {
            genre: read("genre.txt")?,
            mood: read("mood.txt")?,
            instruments: read("instruments.txt")?,
        })
    }

    pub fn tags(&self, d: Dimension) -> Option<&[String]> {
        match d {
            Dimension::Genre => Some(&self.genre),
            Dimension::Mood => Some(&self.mood),
            Dimension::Instruments => Some(&self.instruments),
            Dimension::Tempo => None,
        }
    }
}

/// An immutable, validated set of tracks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    tracks: Vec<TrackMetadata>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(tracks: Vec<TrackMetadata>, vocab: &Vocabulary) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(tracks.len());
        for (i, t) in tracks.iter().enumerate() {
            validate_track(t, vocab)?;
            if by_id.insert(t.track_id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate track_id '{}'", t.track_id)));
            }
        }
        Ok(Self { tracks, by_id })
    }

    pub fn tracks(&self) -> &[TrackMetadata] {
        &self.tracks
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TrackMetadata> {
        self.by_id.get(id).map(|&i| &self.tracks[i])
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &TrackMetadata> {
        self.tracks.iter().filter(move |t| t.split == split)
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for t in &self.tracks {
            c[t.split as usize] += 1;
        }
        c
    }

    /// Returns a copy with splits reassigned from `assignment` (track id → split).
    pub fn with_splits(&self, assignment: &HashMap<String, Split>) -> Result<Corpus> {
        let mut tracks = self.tracks.clone();
        for t in &mut tracks {
            t.split = *assignment
                .get(&t.track_id)
                .ok_or_else(|| Error::Validation(format!("no split for track '{}'", t.track_id)))?;
        }
        Ok(Corpus {
            tracks,
            by_id: self.by_id.clone(),
        })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.tracks)
    }
}

fn validate_track(t: &TrackMetadata, vocab: &Vocabulary) -> Result<()> {
    if t.track_id.is_empty() {
        return Err(Error::Validation("empty track_id".into()));
    }
    if !(t.tempo_bpm.is_finite() && t.tempo_bpm > 0.0) {
        return Err(Error::Validation(format!(
            "track '{}': tempo_bpm must be finite and positive, got {}",
            t.track_id, t.tempo_bpm
        )));
    }
    for d in [Dimension::Genre, Dimension::Mood, Dimension::Instruments] {
        let allowed = vocab.tags(d).unwrap_or(&[]);
        for tag in t.tags(d).into_iter().flatten() {
            if !allowed.contains(tag) {
                return Err(Error::Validation(format!("track '{}': unknown {d} tag '{tag}'", t.track_id)));
            }
        }
    }
    Ok(())
}

/// Loads and validates a JSONL metadata file. Relative `audio_path`s are
/// resolved against the file's directory.
pub fn load_metadata(path: &Path, vocab: &Vocabulary) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut tracks = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let mut t: TrackMetadata = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        validate_track(&t, vocab).map_err(|e| parse_err(e.to_string()))?;
        if let Some(prev) = seen.insert(t.track_id.clone(), line_no) {
            return Err(parse_err(format!("duplicate track_id '{}' (first on line {prev})", t.track_id)));
        }
        let audio = PathBuf::from(&t.audio_path);
        if audio.is_relative() && !t.audio_path.is_empty() {
            t.audio_path = base.join(audio).to_string_lossy().into_owned();
        }
        tracks.push(t);
    }
    Corpus::new(tracks, vocab)
}

/// Whether `a` and `b` are similar along `d`: a shared tag for tag categories,
/// tempi within 5 BPM (inclusive) for tempo.
pub fn similar(a: &TrackMetadata, b: &TrackMetadata, d: Dimension) -> bool {
    match d {
        Dimension::Tempo => (a.tempo_bpm - b.tempo_bpm).abs() <= TEMPO_TOLERANCE_BPM,
        _ => {
            let (x, y) = (a.tags(d).unwrap(), b.tags(d).unwrap());
            x.iter().any(|t| y.contains(t))
        }
    }
}

pub const TEMPO_TOLERANCE_BPM: f64 = 5.0;

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn track(id: &str, g: &[&str], m: &[&str], i: &[&str], bpm: f64) -> TrackMetadata {
        let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        TrackMetadata {
            track_id: id.into(),
            audio_path: String::new(),
            genre: set(g),
            mood: set(m),
            instruments: set(i),
            tempo_bpm: bpm,
            split: Split::Train,
        }
    }

    #[test]
    fn similarity_rules() {
        let a = track("a", &["genre-01"], &["mood-01"], &["instrument-1"], 120.0);
        let b = track("b", &["genre-01", "genre-02"], &["mood-02"], &[], 124.0);
        assert!(similar(&a, &b, Dimension::Tempo));
        assert!(similar(&a, &b, Dimension::Genre));
        assert!(!similar(&a, &b, Dimension::Mood));
        assert!(!similar(&a, &b, Dimension::Instruments));
        for d in Dimension::ALL {
            assert!(similar(&a, &a, d));
        }
        let c = track("c", &[], &[], &[], 125.0);
        assert!(similar(&a, &c, Dimension::Tempo), "exactly 5 BPM apart counts as similar");
        let d = track("d", &[], &[], &[], 125.0001);
        assert!(!similar(&a, &d, Dimension::Tempo));
    }

    #[test]
    fn builtin_vocabulary_sizes() {
        let v = Vocabulary::builtin();
        assert_eq!((v.genre.len(), v.mood.len(), v.instruments.len()), (28, 12, 5));
    }

    #[test]
    fn corpus_rejects_duplicates_and_unknown_tags() {
        let v = Vocabulary::builtin();
        let a = track("a", &["genre-01"], &[], &[], 100.0);
        assert!(Corpus::new(vec![a.clone(), a.clone()], &v).is_err());
        let bad = track("b", &["polka"], &[], &[], 100.0);
        assert!(Corpus::new(vec![bad], &v).is_err());
        let neg = track("c", &[], &[], &[], -1.0);
        assert!(matches!(Corpus::new(vec![neg], &v), Err(Error::Validation(_))));
    }
}
